//! Optimizers, the Logit-DP / Naive-DP / non-private trainers, and
//! frozen-encoder fine-tuning of a classifier head.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_accumulated, loss_gradient, AggregationPath};
use crate::data::{LabeledDataset, PairBatch, PairDataset};
use crate::dp::{clip, gaussian_mechanism, PrivacyParams};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, EvalReport, EvalSpec};
use crate::losses::{batch_loss, LossFamily};
use crate::model::{EmbeddingModel, ModelSpec};
use crate::sensitivity::{combined_sensitivity, family_constants, BoundMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LogitDp,
    NaiveDp,
    NonPrivate,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit_dp" => Ok(Method::LogitDp),
            "naive_dp" => Ok(Method::NaiveDp),
            "non_private" => Ok(Method::NonPrivate),
            _ => Err(Error::config(format!("unknown method `{s}`"))),
        }
    }
}

impl Method {
    pub fn default_lr(self) -> f64 {
        match self {
            Method::LogitDp | Method::NaiveDp => 1e-2,
            Method::NonPrivate => 1e-3,
        }
    }

    pub fn is_private(self) -> bool {
        self != Method::NonPrivate
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::config(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub method: Method,
    pub loss: LossFamily,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip_bound: f64,
    pub privacy: PrivacyParams,
    pub aggregation: AggregationPath,
    pub micro_steps: usize,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
    /// Naive-DP noise std is `σ · factor · B`.
    pub naive_sensitivity_factor: f64,
    pub bound_mode: BoundMode,
    /// Record elapsed milliseconds in the metrics log instead of 0.
    pub wall_clock: bool,
}

impl TrainerConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            loss: LossFamily::Contrastive,
            batch_size: 64,
            steps: 2000,
            lr: method.default_lr(),
            optimizer: OptimizerKind::Adam,
            clip_bound: 1.0,
            privacy: PrivacyParams::none(),
            aggregation: AggregationPath::Lambda,
            micro_steps: 1,
            eval_every: 0,
            seed: 0,
            naive_sensitivity_factor: 1.0,
            bound_mode: BoundMode::Tight,
            wall_clock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < self.loss.min_batch() {
            return Err(Error::config(format!(
                "{} loss needs batch size at least {}",
                self.loss,
                self.loss.min_batch()
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.method.is_private() && !(self.clip_bound > 0.0) {
            return Err(Error::config(format!(
                "clip bound must be positive for private training, got {}",
                self.clip_bound
            )));
        }
        if !(self.privacy.sigma >= 0.0) || !self.privacy.sigma.is_finite() {
            return Err(Error::config(format!(
                "noise multiplier {} is invalid",
                self.privacy.sigma
            )));
        }
        if self.micro_steps == 0 || !self.batch_size.is_multiple_of(self.micro_steps) {
            return Err(Error::config(format!(
                "accumulation steps {} must divide batch size {}",
                self.micro_steps, self.batch_size
            )));
        }
        if !(self.naive_sensitivity_factor > 0.0) {
            return Err(Error::config("naive sensitivity factor must be positive"));
        }
        Ok(())
    }

    /// Noise std divided by `σ`: the mechanism's sensitivity `C` for
    /// Logit-DP, `factor · B` for Naive-DP, 0 without privacy.
    pub fn sensitivity(&self) -> Result<f64> {
        match self.method {
            Method::LogitDp => {
                let c = family_constants(self.loss, self.batch_size)?;
                combined_sensitivity(&c, self.clip_bound, self.bound_mode)
            }
            Method::NaiveDp => Ok(self.naive_sensitivity_factor * self.clip_bound),
            Method::NonPrivate => Ok(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(p: usize) -> Self {
        Self {
            m: vec![0.0; p],
            v: vec![0.0; p],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam; returns the parameter delta.
pub fn adam_update(state: &mut AdamState, g: &[f64], lr: f64) -> Vec<f64> {
    state.t += 1;
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    let mut delta = vec![0.0; g.len()];
    for (k, &gk) in g.iter().enumerate() {
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * gk;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * gk * gk;
        let mh = state.m[k] / c1;
        let vh = state.v[k] / c2;
        delta[k] = -lr * mh / (vh.sqrt() + state.eps);
    }
    delta
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, p: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(p)),
        }
    }

    pub fn apply(&mut self, model: &mut EmbeddingModel, g: &[f64], lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => model.params_mut().add_scaled(-lr, g),
            Optimizer::Adam(state) => {
                if state.m.len() != g.len() {
                    return Err(Error::shape(format!(
                        "optimizer holds {} moments for {} parameters",
                        state.m.len(),
                        g.len()
                    )));
                }
                let delta = adam_update(state, g, lr);
                model.params_mut().add_scaled(1.0, &delta)
            }
        }
    }
}

/// Independent ChaCha8 stream per `(domain, index)` under one seed.
fn derived_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 56) ^ index);
    rng
}

/// Seed of the Gaussian noise drawn at `step`.
pub fn noise_seed(seed: u64, step: u64) -> u64 {
    derived_rng(seed, 1, step).next_u64()
}

/// The gradient a step feeds to its optimizer, with the pre-noise value.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGradient {
    pub loss: f64,
    /// `ḡ` for Logit-DP, `clip(∇𝓛, B)` for Naive-DP, `∇𝓛` otherwise.
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub noise_std: f64,
}

fn privatize(clean: Vec<f64>, loss: f64, config: &TrainerConfig, step: u64) -> Result<StepGradient> {
    let sigma = config.privacy.sigma;
    if sigma == 0.0 {
        return Ok(StepGradient {
            loss,
            noisy: clean.clone(),
            clean,
            noise_std: 0.0,
        });
    }
    let c = config.sensitivity()?;
    let noisy = gaussian_mechanism(&clean, c, sigma, noise_seed(config.seed, step))?;
    Ok(StepGradient {
        loss,
        clean,
        noisy,
        noise_std: sigma * c,
    })
}

/// The released gradient of `config.method` on `batch` at `step`.
pub fn step_gradient(
    model: &EmbeddingModel,
    batch: &PairBatch,
    config: &TrainerConfig,
    step: u64,
) -> Result<StepGradient> {
    match config.method {
        Method::LogitDp => {
            let (g, diag) = aggregate_accumulated(
                model,
                batch,
                config.loss,
                config.clip_bound,
                config.aggregation,
                config.micro_steps,
            )?;
            privatize(g, diag.loss, config, step)
        }
        Method::NaiveDp => {
            let (loss, g) = loss_gradient(model, batch, config.loss)?;
            privatize(clip(&g, config.clip_bound), loss, config, step)
        }
        Method::NonPrivate => {
            let (loss, g) = loss_gradient(model, batch, config.loss)?;
            Ok(StepGradient {
                loss,
                noisy: g.clone(),
                clean: g,
                noise_std: 0.0,
            })
        }
    }
}

fn run_step(
    model: &mut EmbeddingModel,
    opt: &mut Optimizer,
    batch: &PairBatch,
    config: &TrainerConfig,
    step: u64,
) -> Result<StepGradient> {
    let g = step_gradient(model, batch, config, step)?;
    opt.apply(model, &g.noisy, config.lr)?;
    Ok(g)
}

fn expect_method(config: &TrainerConfig, method: Method) -> Result<()> {
    if config.method != method {
        return Err(Error::config(format!(
            "step for {method:?} called with method {:?}",
            config.method
        )));
    }
    Ok(())
}

/// Clip every logit gradient, aggregate, add noise scaled to `σ·C`, update.
pub fn logit_dp_step(
    model: &mut EmbeddingModel,
    opt: &mut Optimizer,
    batch: &PairBatch,
    config: &TrainerConfig,
    step: u64,
) -> Result<StepGradient> {
    expect_method(config, Method::LogitDp)?;
    run_step(model, opt, batch, config, step)
}

/// Clip the whole batch gradient to `B`, add noise of std `σ·factor·B`, update.
pub fn naive_dp_step(
    model: &mut EmbeddingModel,
    opt: &mut Optimizer,
    batch: &PairBatch,
    config: &TrainerConfig,
    step: u64,
) -> Result<StepGradient> {
    expect_method(config, Method::NaiveDp)?;
    run_step(model, opt, batch, config, step)
}

pub fn non_private_step(
    model: &mut EmbeddingModel,
    opt: &mut Optimizer,
    batch: &PairBatch,
    config: &TrainerConfig,
    step: u64,
) -> Result<StepGradient> {
    expect_method(config, Method::NonPrivate)?;
    run_step(model, opt, batch, config, step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub examples_seen: usize,
    pub loss: f64,
    /// `loss` over the smallest loss logged in the run.
    pub relative_loss: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,examples_seen,loss,relative_loss,wall_ms";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step, r.examples_seen, r.loss, r.relative_loss, r.wall_ms
        );
    }
    s
}

fn fill_relative(rows: &mut [MetricRow]) {
    let min = rows.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    for r in rows {
        r.relative_loss = if min > 0.0 { r.loss / min } else { f64::NAN };
    }
}

/// Held-out data scored by k-NN during and after pre-training.
#[derive(Clone, Debug)]
pub struct EvalPlan<'a> {
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub spec: EvalSpec,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: EmbeddingModel,
    pub log: Vec<MetricRow>,
    /// `(step, report)`; the last entry scores the final model.
    pub evals: Vec<(usize, EvalReport)>,
}

/// Runs `config.steps` steps on batches drawn without replacement within
/// each epoch; every epoch reshuffles and drops its incomplete tail.
pub fn pretrain(
    mut model: EmbeddingModel,
    data: &PairDataset,
    config: &TrainerConfig,
    eval: Option<&EvalPlan<'_>>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let n = config.batch_size;
    if data.len() < n {
        return Err(Error::config(format!(
            "dataset of {} pairs is smaller than batch size {n}",
            data.len()
        )));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::config(format!(
            "data dim {} does not match model input dim {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let mut opt = Optimizer::new(config.optimizer, model.param_count());
    let per_epoch = data.len() / n;
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.steps);
    let mut evals = Vec::new();
    let start = Instant::now();
    for t in 0..config.steps {
        let slot = t % per_epoch;
        if slot == 0 {
            order = (0..data.len()).collect();
            order.shuffle(&mut derived_rng(config.seed, 2, (t / per_epoch) as u64));
        }
        let batch = data.batch(&order[slot * n..(slot + 1) * n])?;
        let g = run_step(&mut model, &mut opt, &batch, config, t as u64)?;
        log.push(MetricRow {
            step: t + 1,
            examples_seen: (t + 1) * n,
            loss: g.loss,
            relative_loss: 0.0,
            wall_ms: if config.wall_clock {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        if let Some(plan) = eval {
            if config.eval_every > 0 && (t + 1) % config.eval_every == 0 && t + 1 < config.steps {
                evals.push((t + 1, evaluate_model(&model, plan.train, plan.test, &plan.spec)?));
            }
        }
    }
    fill_relative(&mut log);
    if let Some(plan) = eval {
        evals.push((config.steps, evaluate_model(&model, plan.train, plan.test, &plan.spec)?));
    }
    Ok(PretrainOutcome { model, log, evals })
}

/// Mean batch loss over consecutive size-`n` chunks of `data` in stored
/// order; a short tail is ignored.
pub fn dataset_loss(model: &EmbeddingModel, data: &PairDataset, n: usize, family: LossFamily) -> Result<f64> {
    let chunks = data.len() / n.max(1);
    if n == 0 || chunks == 0 {
        return Err(Error::config(format!(
            "cannot form a batch of {n} from {} pairs",
            data.len()
        )));
    }
    let mut total = 0.0;
    for c in 0..chunks {
        let idx: Vec<usize> = (c * n..(c + 1) * n).collect();
        total += batch_loss(model, &data.batch(&idx)?, family)?;
    }
    Ok(total / chunks as f64)
}

/// Fully-connected classifier on top of a frozen encoder's embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    net: EmbeddingModel,
}

pub const HEAD_HIDDEN: [usize; 2] = [64, 32];

impl ClassifierHead {
    pub fn new(embed_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("a classifier head needs at least two classes"));
        }
        let spec = ModelSpec::new(embed_dim, HEAD_HIDDEN.to_vec(), num_classes);
        Ok(Self {
            net: EmbeddingModel::init(&spec, seed)?,
        })
    }

    pub fn from_model(net: EmbeddingModel) -> Self {
        Self { net }
    }

    pub fn model(&self) -> &EmbeddingModel {
        &self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.net.embed_dim()
    }

    pub fn logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        self.net.forward(embeddings)
    }

    pub fn predict(&self, embeddings: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(embeddings)?;
        Ok((0..z.rows()).map(|r| argmax(z.row(r))).collect())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−log softmax(z)_label`.
pub fn cross_entropy(z: &[f64], label: usize) -> Result<f64> {
    if label >= z.len() {
        return Err(Error::Data(format!("label {label} outside {} classes", z.len())));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - z[label])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 64,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRow {
    pub step: usize,
    pub loss: f64,
}

/// Trains `head` with Adam on mean softmax cross-entropy over minibatches of
/// the encoder's embeddings. The encoder is only read.
pub fn finetune(
    encoder: &EmbeddingModel,
    head: ClassifierHead,
    data: &LabeledDataset,
    config: &FinetuneConfig,
) -> Result<(ClassifierHead, Vec<FinetuneRow>)> {
    if head.input_dim() != encoder.embed_dim() {
        return Err(Error::config(format!(
            "head input dim {} differs from encoder embedding dim {}",
            head.input_dim(),
            encoder.embed_dim()
        )));
    }
    if let Some(l) = data.labels().iter().find(|&&l| l >= head.num_classes()) {
        return Err(Error::Data(format!(
            "label {l} outside {} head classes",
            head.num_classes()
        )));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::config(
            "fine-tuning needs a positive batch size and learning rate",
        ));
    }
    if data.is_empty() {
        return Err(Error::Data("fine-tuning set is empty".into()));
    }
    let emb = encoder.forward(data.features())?;
    let mut net = head.net;
    let n = config.batch_size.min(data.len());
    let per_epoch = data.len() / n;
    let mut opt = AdamState::new(net.param_count());
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let slot = t % per_epoch;
        if slot == 0 {
            order = (0..data.len()).collect();
            order.shuffle(&mut derived_rng(config.seed, 3, (t / per_epoch) as u64));
        }
        let mut grad = vec![0.0; net.param_count()];
        let mut loss = 0.0;
        for &r in &order[slot * n..(slot + 1) * n] {
            let tr = net.trace(emb.row(r));
            let z = tr.embedding();
            let label = data.labels()[r];
            loss += cross_entropy(z, label)?;
            let mut dz = softmax(z);
            dz[label] -= 1.0;
            net.backprop(&tr, &dz, 1.0 / n as f64, &mut grad);
        }
        let delta = adam_update(&mut opt, &grad, config.lr);
        net.params_mut().add_scaled(1.0, &delta)?;
        log.push(FinetuneRow {
            step: t + 1,
            loss: loss / n as f64,
        });
    }
    Ok((ClassifierHead { net }, log))
}

/// Fraction of `data` the encoder-plus-head pipeline labels correctly.
pub fn head_accuracy(encoder: &EmbeddingModel, head: &ClassifierHead, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = head.predict(&encoder.forward(data.features())?)?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / data.len() as f64)
}
