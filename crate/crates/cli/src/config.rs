//! Run configuration: JSON file values overlaid by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use logit_dp::aggregation::AggregationPath;
use logit_dp::data::{
    pairs_from_labeled, read_cache, read_cifar10_binary, synth_pairs, LabeledDataset, PairDataset, SynthSpec,
};
use logit_dp::dp::{CalibrationMode, PrivacyParams};
use logit_dp::evaluation::{Distance, EvalSpec};
use logit_dp::losses::LossFamily;
use logit_dp::model::ModelSpec;
use logit_dp::sensitivity::BoundMode;
use logit_dp::training::{FinetuneConfig, Method, OptimizerKind, TrainerConfig};
use logit_dp::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Cifar10,
    Cache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// File for `cifar10`, path stem for `cache`.
    pub path: Option<PathBuf>,
    pub synthetic: SynthSpec,
    /// Std of the perturbation pairing file-backed examples with themselves.
    pub pair_noise: f64,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            synthetic: SynthSpec::default(),
            pair_noise: 0.05,
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            embed_dim: 4,
        }
    }
}

/// Everything a run needs. Serialized, after flags are applied, into the
/// run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub loss: LossFamily,
    pub batch_size: usize,
    pub steps: usize,
    /// Per-method default when absent.
    pub lr: Option<f64>,
    pub optimizer: OptimizerKind,
    pub clip_bound: f64,
    pub epsilon: Option<f64>,
    pub delta: f64,
    /// Noise multiplier set directly; excludes `epsilon`.
    pub sigma: Option<f64>,
    pub calibration: CalibrationMode,
    pub aggregation: AggregationPath,
    pub micro_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub naive_sensitivity_factor: f64,
    pub bound_mode: BoundMode,
    pub wall_clock: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub eval: EvalSpec,
    pub finetune: FinetuneConfig,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::NonPrivate,
            loss: LossFamily::Contrastive,
            batch_size: 64,
            steps: 2000,
            lr: None,
            optimizer: OptimizerKind::Adam,
            clip_bound: 1.0,
            epsilon: None,
            delta: 1e-5,
            sigma: None,
            calibration: CalibrationMode::Standard,
            aggregation: AggregationPath::Lambda,
            micro_steps: 1,
            eval_every: 0,
            seed: 0,
            naive_sensitivity_factor: 1.0,
            bound_mode: BoundMode::Tight,
            wall_clock: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            eval: EvalSpec::default(),
            finetune: FinetuneConfig::default(),
            checkpoint: None,
            out: PathBuf::from("out"),
        }
    }
}

/// Comma-separated widths.
#[derive(Clone, Debug)]
pub struct Widths(pub Vec<usize>);

fn parse_list(s: &str) -> std::result::Result<Widths, String> {
    if s.trim().is_empty() {
        return Ok(Widths(Vec::new()));
    }
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(Widths)
}

/// Flags shared by the run subcommands. Every flag is optional and, when
/// given, overrides the value from `--config`.
#[derive(Args, Debug, Default, Clone)]
pub struct RunFlags {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossFamily>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub clip_bound: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_parser = parse_calibration)]
    pub calibration: Option<CalibrationMode>,
    #[arg(long, value_parser = parse_aggregation)]
    pub aggregation: Option<AggregationPath>,
    #[arg(long)]
    pub micro_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Naive-DP noise std multiplier on `σ·B` (1 or 2).
    #[arg(long)]
    pub naive_factor: Option<f64>,
    #[arg(long, value_parser = parse_bound_mode)]
    pub bound_mode: Option<BoundMode>,
    /// Record elapsed milliseconds in metrics.csv (breaks byte-identical reruns).
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub data: Option<DataSource>,
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub points_per_cluster: Option<usize>,
    #[arg(long)]
    pub cluster_spread: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub augment_noise: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Hidden widths, comma separated (empty for none).
    #[arg(long, value_parser = parse_list)]
    pub hidden: Option<Widths>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_parser = parse_distance)]
    pub distance: Option<Distance>,
    #[arg(long)]
    pub head_steps: Option<usize>,
    #[arg(long)]
    pub head_lr: Option<f64>,
}

fn lift<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    lift(s)
}
fn parse_loss(s: &str) -> std::result::Result<LossFamily, String> {
    lift(s)
}
fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    lift(s)
}
fn parse_calibration(s: &str) -> std::result::Result<CalibrationMode, String> {
    lift(s)
}
fn parse_aggregation(s: &str) -> std::result::Result<AggregationPath, String> {
    lift(s)
}
fn parse_distance(s: &str) -> std::result::Result<Distance, String> {
    lift(s)
}
fn parse_bound_mode(s: &str) -> std::result::Result<BoundMode, String> {
    match s {
        "tight" => Ok(BoundMode::Tight),
        "conservative_nl" => Ok(BoundMode::ConservativeNL),
        _ => Err(format!("unknown bound mode `{s}`")),
    }
}

macro_rules! overlay {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

impl RunFlags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        overlay!(c.method, self.method);
        overlay!(c.loss, self.loss);
        overlay!(c.batch_size, self.batch_size);
        overlay!(c.steps, self.steps);
        if self.lr.is_some() {
            c.lr = self.lr;
        }
        overlay!(c.optimizer, self.optimizer);
        overlay!(c.clip_bound, self.clip_bound);
        if self.epsilon.is_some() {
            c.epsilon = self.epsilon;
            c.sigma = None;
        }
        overlay!(c.delta, self.delta);
        if self.sigma.is_some() {
            c.sigma = self.sigma;
            c.epsilon = None;
        }
        overlay!(c.calibration, self.calibration);
        overlay!(c.aggregation, self.aggregation);
        overlay!(c.micro_steps, self.micro_steps);
        overlay!(c.eval_every, self.eval_every);
        overlay!(c.seed, self.seed);
        overlay!(c.naive_sensitivity_factor, self.naive_factor);
        overlay!(c.bound_mode, self.bound_mode);
        c.wall_clock |= self.wall_clock;
        overlay!(c.out, self.out);
        if self.checkpoint.is_some() {
            c.checkpoint = self.checkpoint.clone();
        }
        overlay!(c.data.source, self.data);
        if self.data_path.is_some() {
            c.data.path = self.data_path.clone();
        }
        let s = &mut c.data.synthetic;
        overlay!(s.seed, self.data_seed);
        overlay!(s.num_clusters, self.clusters);
        overlay!(s.dim, self.dim);
        overlay!(s.points_per_cluster, self.points_per_cluster);
        overlay!(s.cluster_spread, self.cluster_spread);
        overlay!(s.separation, self.separation);
        overlay!(s.augment_noise, self.augment_noise);
        overlay!(c.data.train_fraction, self.train_fraction);
        overlay!(c.model.hidden, self.hidden.as_ref().map(|w| w.0.clone()));
        overlay!(c.model.embed_dim, self.embed_dim);
        overlay!(c.eval.k, self.k);
        overlay!(c.eval.beta, self.beta);
        overlay!(c.eval.distance, self.distance);
        overlay!(c.finetune.steps, self.head_steps);
        overlay!(c.finetune.lr, self.head_lr);
        c.finetune.seed = c.seed;
        Ok(c)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn privacy(&self) -> Result<PrivacyParams> {
        if !self.method.is_private() {
            return Ok(PrivacyParams::none());
        }
        match (self.epsilon, self.sigma) {
            (Some(_), Some(_)) => Err(Error::Config("give either epsilon or sigma, not both".into())),
            (Some(eps), None) => PrivacyParams::calibrated(eps, self.delta, self.calibration),
            (None, Some(sigma)) => PrivacyParams::from_sigma(sigma, self.delta, self.calibration),
            (None, None) => Err(Error::Config("private methods need --epsilon or --sigma".into())),
        }
    }

    pub fn trainer(&self) -> Result<TrainerConfig> {
        let t = TrainerConfig {
            method: self.method,
            loss: self.loss,
            batch_size: self.batch_size,
            steps: self.steps,
            lr: self.lr.unwrap_or(self.method.default_lr()),
            optimizer: self.optimizer,
            clip_bound: self.clip_bound,
            privacy: self.privacy()?,
            aggregation: self.aggregation,
            micro_steps: self.micro_steps,
            eval_every: self.eval_every,
            seed: self.seed,
            naive_sensitivity_factor: self.naive_sensitivity_factor,
            bound_mode: self.bound_mode,
            wall_clock: self.wall_clock,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn model_spec(&self, input_dim: usize) -> Result<ModelSpec> {
        let spec = ModelSpec::new(input_dim, self.model.hidden.clone(), self.model.embed_dim);
        spec.validate()?;
        Ok(spec)
    }

    pub fn eval_spec(&self) -> Result<EvalSpec> {
        if self.eval.k == 0 || !(self.eval.beta > 0.0) {
            return Err(Error::Config("k must be positive and beta > 0".into()));
        }
        Ok(self.eval)
    }

    /// The full pair dataset split into train and test parts.
    pub fn load_data(&self) -> Result<(PairDataset, PairDataset)> {
        let d = &self.data;
        let all = match d.source {
            DataSource::Synthetic => synth_pairs(&d.synthetic)?,
            DataSource::Cifar10 => {
                let ds = read_cifar10_binary(self.data_path()?)?;
                pairs_from_labeled(&ds, d.pair_noise, d.split_seed)?
            }
            DataSource::Cache => read_cache(self.data_path()?)?.0,
        };
        all.split(d.train_fraction, d.split_seed)
    }

    fn data_path(&self) -> Result<&Path> {
        self.data
            .path
            .as_deref()
            .ok_or_else(|| Error::Config("this data source needs --data-path".into()))
    }
}

/// Anchor features with their latent labels.
pub fn labeled(data: &PairDataset) -> LabeledDataset {
    data.anchors_labeled()
}
