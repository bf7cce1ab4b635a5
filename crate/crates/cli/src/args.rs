//! Command-line flags and the optional TOML config file.
//!
//! Every tunable is an `Option` so that a flag, when given, overrides the
//! config file, which in turn overrides the library default.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use fracsrf::datasets::SinusoidsSpec;
use fracsrf::experiments::{ModelOptions, SweepAxis};
use fracsrf::layers::AlphaScale;
use fracsrf::model::{Head, ModelKind};
use fracsrf::tape::Precision;
use fracsrf::train::TrainConfig;

use crate::error::{CliError, CliResult};

/// Parses an enum from its serde name, e.g. `norm_matched` or `f32`.
fn serde_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Fills every `None` field of `$a` from `$b`.
macro_rules! fill {
    ($a:expr, $b:expr; $($f:ident),+) => {
        $( if $a.$f.is_none() { $a.$f = $b.$f; } )+
    };
}

#[derive(Debug, Parser)]
#[command(name = "fracsrf", version, about = "Train and inspect fractional-order Gaussian derivative networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the Sinusoids dataset and write meta.json + data.bin.
    GenSinusoids(GenArgs),
    /// Train one Exp-1 network and write its checkpoint and run report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set.
    Eval(EvalArgs),
    /// Compare plain CNN, SRF and FracSRF over several seeds.
    Exp1(Exp1Args),
    /// Sweep the FracSRF σ or order initialisation.
    Sweep(SweepArgs),
    /// Dump every structured kernel of a checkpoint as PGM and CSV.
    InspectKernels(InspectArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print parameter counts of the Exp-1 and NiN networks.
    CountParams(CountArgs),
    /// Compare the interpolated basis with the Caputo-Fabrizio derivative.
    CompareCf(CompareCfArgs),
}

/// Shape of the generated Sinusoids data.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinusoidFlags {
    /// Image side in pixels [default: 16]
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Number of classes [default: 5]
    #[arg(long)]
    pub classes: Option<usize>,
    /// Lowest class frequency in cycles per pixel [default: 0.03]
    #[arg(long)]
    pub freq_lo: Option<f64>,
    /// Highest class frequency in cycles per pixel [default: 0.4]
    #[arg(long)]
    pub freq_hi: Option<f64>,
    /// Training images per class [default: 600]
    #[arg(long)]
    pub train_per_class: Option<usize>,
    /// Test images per class [default: 200]
    #[arg(long)]
    pub test_per_class: Option<usize>,
}

impl SinusoidFlags {
    fn fill(&mut self, other: &Self) {
        fill!(self, other.clone(); image_size, classes, freq_lo, freq_hi, train_per_class, test_per_class);
    }

    pub fn spec(&self, seed: u64) -> SinusoidsSpec {
        let d = SinusoidsSpec::default();
        let custom_freqs = self.classes.is_some() || self.freq_lo.is_some() || self.freq_hi.is_some();
        let frequencies = if custom_freqs {
            SinusoidsSpec::geometric(
                0,
                self.classes.unwrap_or(d.num_classes),
                self.freq_lo.unwrap_or(d.frequencies[0]),
                self.freq_hi.unwrap_or(d.frequencies[d.frequencies.len() - 1]),
                0,
                0,
                0,
            )
            .frequencies
        } else {
            d.frequencies
        };
        SinusoidsSpec {
            image_size: self.image_size.unwrap_or(d.image_size),
            num_classes: frequencies.len(),
            frequencies,
            train_per_class: self.train_per_class.unwrap_or(d.train_per_class),
            test_per_class: self.test_per_class.unwrap_or(d.test_per_class),
            seed,
        }
    }
}

/// Where train and test images come from.
#[derive(Debug, Clone, Default, Args)]
pub struct SourceFlags {
    /// Read data from this directory (a gen-sinusoids export, or the
    /// CIFAR-10 binary batches) instead of generating Sinusoids
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed of generated Sinusoids data [default: 0]
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Keep this class-stratified fraction of the training set
    #[arg(long)]
    pub subsample: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFlags {
    /// Training epochs [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate [default: 0.05]
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// L2 weight decay [default: 5e-4]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Learning rate of log2 σ [default: --lr]
    #[arg(long)]
    pub sigma_lr: Option<f64>,
    /// Weight decay of log2 σ [default: --weight-decay]
    #[arg(long)]
    pub sigma_wd: Option<f64>,
    /// Weight of the SRF α-entropy penalty [default: 0]
    #[arg(long)]
    pub entropy_lambda: Option<f64>,
    /// Upper clip for learned orders [default: 10]
    #[arg(long)]
    pub nu_max: Option<f64>,
    /// Convolution arithmetic: f32 or f64 [default: f32]
    #[arg(long, value_parser = serde_name::<Precision>)]
    #[serde(default, deserialize_with = "opt_name")]
    pub precision: Option<Precision>,
}

impl TrainFlags {
    fn fill(&mut self, other: &Self) {
        fill!(self, other.clone();
            epochs, batch_size, lr, momentum, weight_decay, sigma_lr, sigma_wd, entropy_lambda, nu_max, precision);
    }

    pub fn config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            momentum: self.momentum.unwrap_or(d.momentum),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            sigma_lr: self.sigma_lr.or(d.sigma_lr),
            sigma_wd: self.sigma_wd.or(d.sigma_wd),
            entropy_lambda: self.entropy_lambda.unwrap_or(d.entropy_lambda),
            seed,
            nu_max: self.nu_max.unwrap_or(d.nu_max),
            precision: self.precision.unwrap_or(d.precision),
        }
    }
}

/// Accepts the serde name of an enum inside the config file.
fn opt_name<'de, D, T>(d: D) -> Result<Option<T>, D::Error>
where
    D: serde::Deserializer<'de>,
    T: DeserializeOwned,
{
    let s = String::deserialize(d)?;
    serde_name(&s).map(Some).map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelFlags {
    /// After the last conv: linear, relu or abs [default: linear]
    #[arg(long, value_parser = serde_name::<Head>)]
    #[serde(default, deserialize_with = "opt_name")]
    pub head: Option<Head>,
    /// Structured α initialisation: fan_in or norm_matched [default: fan_in]
    #[arg(long, value_parser = serde_name::<AlphaScale>)]
    #[serde(default, deserialize_with = "opt_name")]
    pub alpha_scale: Option<AlphaScale>,
    /// Lower end of the uniform order initialisation [default: 1]
    #[arg(long)]
    pub order_lo: Option<f64>,
    /// Upper end of the uniform order initialisation [default: 6]
    #[arg(long)]
    pub order_hi: Option<f64>,
    /// Initial σ of structured layers [default: 1]
    #[arg(long)]
    pub sigma_init: Option<f64>,
}

impl ModelFlags {
    fn fill(&mut self, other: &Self) {
        fill!(self, other.clone(); head, alpha_scale, order_lo, order_hi, sigma_init);
    }

    pub fn options(&self) -> ModelOptions {
        let mut o = ModelOptions::default();
        o.head = self.head.unwrap_or(o.head);
        o.init.alpha_scale = self.alpha_scale.unwrap_or(o.init.alpha_scale);
        o.init.order_range = (self.order_lo.unwrap_or(o.init.order_range.0), self.order_hi.unwrap_or(o.init.order_range.1));
        o.init.sigma = self.sigma_init.unwrap_or(o.init.sigma);
        o
    }
}

/// `[data]` section of the config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataFile {
    pub image_size: Option<usize>,
    pub classes: Option<usize>,
    pub freq_lo: Option<f64>,
    pub freq_hi: Option<f64>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub seed: Option<u64>,
    pub path: Option<PathBuf>,
    pub subsample: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepFile {
    pub axis: Option<String>,
    pub values: Option<Vec<String>>,
}

/// The whole config file; every section is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seeds: Option<usize>,
    pub jobs: Option<usize>,
    pub data: DataFile,
    pub train: TrainFlags,
    pub model: ModelFlags,
    pub sweep: SweepFile,
}

impl FileConfig {
    pub fn load(path: Option<&PathBuf>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    fn sinusoid(&self) -> SinusoidFlags {
        let d = &self.data;
        SinusoidFlags {
            image_size: d.image_size,
            classes: d.classes,
            freq_lo: d.freq_lo,
            freq_hi: d.freq_hi,
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
        }
    }
}

/// Flags shared by the commands that train.
#[derive(Debug, Clone, Args)]
pub struct RunFlags {
    /// Optional TOML config; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: SinusoidFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub model: ModelFlags,
}

impl RunFlags {
    /// Loads the config file and folds it under the flags.
    pub fn resolve(&mut self) -> CliResult<FileConfig> {
        let file = FileConfig::load(self.config.as_ref())?;
        self.data.fill(&file.sinusoid());
        self.train.fill(&file.train);
        self.model.fill(&file.model);
        Ok(file)
    }
}

impl SourceFlags {
    pub fn fill(&mut self, file: &FileConfig) {
        fill!(self, file.data.clone(); subsample);
        if self.data.is_none() {
            self.data = file.data.path.clone();
        }
        if self.data_seed.is_none() {
            self.data_seed = file.data.seed;
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Seed of the generated images
    #[arg(long)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Optional TOML config; flags override its [data] section
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: SinusoidFlags,
}

impl GenArgs {
    pub fn spec(&mut self) -> CliResult<SinusoidsSpec> {
        let file = FileConfig::load(self.config.as_ref())?;
        self.data.fill(&file.sinusoid());
        Ok(self.data.spec(self.seed))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Network family: cnn, srf or fracsrf
    #[arg(long)]
    pub model: ModelKind,
    /// Seed of initialisation and batch order
    #[arg(long)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Train σ of the structured layers
    #[arg(long)]
    pub learn_sigma: bool,
    #[command(flatten)]
    pub source: SourceFlags,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Model spec [default: model.json next to the checkpoint]
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Recorded in eval.json; evaluation itself is deterministic
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluation batch size [default: 256]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Convolution arithmetic: f32 or f64 [default: f32]
    #[arg(long, value_parser = serde_name::<Precision>)]
    pub precision: Option<Precision>,
    /// Optional TOML config; flags override its [data] section
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub source: SourceFlags,
    #[command(flatten)]
    pub data: SinusoidFlags,
}

impl EvalArgs {
    pub fn resolve(&mut self) -> CliResult<()> {
        let file = FileConfig::load(self.config.as_ref())?;
        self.data.fill(&file.sinusoid());
        self.source.fill(&file);
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Exp1Args {
    /// First seed; runs use seed, seed + 1, …
    #[arg(long)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds per model [default: 5]
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Worker threads; 1 keeps timings undisturbed [default: 1]
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Seed of the generated Sinusoids data [default: 0]
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// sigma_init or order_init [default: order_init]
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated values: σ values for sigma_init, `lo:hi` ranges
    /// for order_init [default: 0.25,0.5,1,2,4 or 1:3,3:6,6:10]
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
    /// First seed; runs use seed, seed + 1, …
    #[arg(long)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds per value [default: 3]
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Worker threads; 1 keeps timings undisturbed [default: 1]
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Seed of the generated Sinusoids data [default: 0]
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[command(flatten)]
    pub run: RunFlags,
}

impl SweepArgs {
    pub fn axis(&mut self, file: &FileConfig) -> CliResult<SweepAxis> {
        let name = self.axis.clone().or_else(|| file.sweep.axis.clone()).unwrap_or_else(|| "order_init".into());
        let values = self.values.clone().or_else(|| file.sweep.values.clone());
        let bad = |v: &str| CliError::Usage(format!("bad sweep value `{v}`"));
        match name.as_str() {
            "sigma_init" => match values {
                None => Ok(SweepAxis::sigma_default()),
                Some(v) => v
                    .iter()
                    .map(|s| s.trim().parse::<f64>().map_err(|_| bad(s)))
                    .collect::<CliResult<_>>()
                    .map(SweepAxis::SigmaInit),
            },
            "order_init" => match values {
                None => Ok(SweepAxis::order_default()),
                Some(v) => v
                    .iter()
                    .map(|s| {
                        let (lo, hi) = s.trim().split_once(':').ok_or_else(|| bad(s))?;
                        Ok((lo.parse().map_err(|_| bad(s))?, hi.parse().map_err(|_| bad(s))?))
                    })
                    .collect::<CliResult<_>>()
                    .map(SweepAxis::OrderInit),
            },
            other => Err(CliError::Usage(format!("unknown sweep axis `{other}` (expected sigma_init or order_init)"))),
        }
    }
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Model spec [default: model.json next to the checkpoint]
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Recorded in the index; inspection is deterministic
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed of the random test network and input
    #[arg(long)]
    pub seed: u64,
    /// Directory for gradcheck.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Input channels of the Exp-1 networks
    #[arg(long, default_value_t = 1)]
    pub in_channels: usize,
    /// Classes of the Exp-1 networks
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Directory for params.json
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for uniformity; counting is deterministic
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CompareCfArgs {
    /// Gaussian scale
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// CSV file for the curves and RMSEs
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for uniformity; the comparison is deterministic
    #[arg(long)]
    pub seed: Option<u64>,
}
