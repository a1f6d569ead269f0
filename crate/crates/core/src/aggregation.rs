//! Clipped aggregation of per-logit gradients.
//!
//! The aggregate is `ḡ = Σ_i Σ_j τ_ij · Clip_B(g_ij)` where `g_ij = ∇_w Z_ij`
//! and `τ_ij = ∂ℓ^{(i,n)}/∂Z_ij`. Two routes compute it:
//!
//! * [`aggregate_direct`] materializes all `n²` gradients `g_ij`;
//! * [`aggregate_lambda`] first computes the scalars `(τ_ij, ‖g_ij‖)` one
//!   pair at a time, folds them into fixed weights
//!   `λ_ij = τ_ij · min{B/‖g_ij‖, 1}`, then takes a single gradient of
//!   `F_X(w) = Σ λ_ij S(Φ_w(x_i), Φ_w(x'_j))`.
//!
//! Since `g_ij = J_iᵀ ∂S/∂u + J'_jᵀ ∂S/∂v`, the gradient of `F_X` is a sum of
//! `2n` backward passes with accumulated embedding cotangents.

use serde::{Deserialize, Serialize};

use crate::data::PairBatch;
use crate::dp::clip_scale;
use crate::error::{Error, Result};
use crate::losses::{cosine_with_grads, LogitMatrix, LossFamily};
use crate::model::{EmbeddingModel, ForwardTrace};
use crate::tensor::{axpy, dot, norm, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationPath {
    Direct,
    #[default]
    Lambda,
}

impl std::str::FromStr for AggregationPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "lambda" => Ok(Self::Lambda),
            other => Err(Error::config(format!("unknown aggregation path `{other}`"))),
        }
    }
}

/// Forward traces of every anchor and positive in a batch.
pub struct BatchTraces {
    anchors: Vec<ForwardTrace>,
    positives: Vec<ForwardTrace>,
}

impl BatchTraces {
    pub fn new(model: &EmbeddingModel, batch: &PairBatch) -> Result<Self> {
        if batch.dim() != model.input_dim() {
            return Err(Error::shape(format!(
                "batch width {} for model input {}",
                batch.dim(),
                model.input_dim()
            )));
        }
        let anchors: Vec<ForwardTrace> = (0..batch.len()).map(|i| model.trace(batch.anchor(i))).collect();
        let positives: Vec<ForwardTrace> = (0..batch.len()).map(|i| model.trace(batch.positive(i))).collect();
        if let Some(i) = anchors.iter().position(|t| norm(t.embedding()) <= 0.0) {
            return Err(Error::DegenerateLogit { i, j: 0 });
        }
        if let Some(j) = positives.iter().position(|t| norm(t.embedding()) <= 0.0) {
            return Err(Error::DegenerateLogit { i: 0, j });
        }
        Ok(Self { anchors, positives })
    }

    pub fn n(&self) -> usize {
        self.anchors.len()
    }

    pub fn logits(&self) -> Result<LogitMatrix> {
        let a: Vec<Vec<f64>> = self.anchors.iter().map(|t| t.embedding().to_vec()).collect();
        let p: Vec<Vec<f64>> = self.positives.iter().map(|t| t.embedding().to_vec()).collect();
        LogitMatrix::from_embeddings(&a, &p)
    }

    fn cotangents(&self, i: usize, j: usize) -> (Vec<f64>, Vec<f64>) {
        let (_, du, dv) = cosine_with_grads(self.anchors[i].embedding(), self.positives[j].embedding());
        (du, dv)
    }

    /// Writes `g_ij = ∇_w Z_ij` into `out` (overwriting it).
    pub fn logit_gradient(&self, model: &EmbeddingModel, i: usize, j: usize, out: &mut [f64]) {
        out.fill(0.0);
        let (du, dv) = self.cotangents(i, j);
        model.backprop(&self.anchors[i], &du, 1.0, out);
        model.backprop(&self.positives[j], &dv, 1.0, out);
    }

    /// `Σ_ij weight_ij ∇_w Z_ij` over rows `rows`, via `2n` backward passes.
    fn weighted_gradient(&self, model: &EmbeddingModel, weights: &[f64], rows: std::ops::Range<usize>) -> Vec<f64> {
        let n = self.n();
        let d = model.embed_dim();
        let mut anchor_cot = vec![vec![0.0; d]; n];
        let mut positive_cot = vec![vec![0.0; d]; n];
        let an: Vec<f64> = self.anchors.iter().map(|t| norm(t.embedding())).collect();
        let pn: Vec<f64> = self.positives.iter().map(|t| norm(t.embedding())).collect();
        for i in rows.clone() {
            let u = self.anchors[i].embedding();
            for j in 0..n {
                let w = weights[i * n + j];
                if w == 0.0 {
                    continue;
                }
                // same arithmetic as `cosine_with_grads`, without allocating
                let v = self.positives[j].embedding();
                let (nu, nv) = (an[i], pn[j]);
                let c = dot(u, v) / (nu * nv);
                for k in 0..d {
                    anchor_cot[i][k] += w * (v[k] / (nu * nv) - c * u[k] / (nu * nu));
                    positive_cot[j][k] += w * (u[k] / (nu * nv) - c * v[k] / (nv * nv));
                }
            }
        }
        let mut grad = vec![0.0; model.param_count()];
        for i in rows {
            model.backprop(&self.anchors[i], &anchor_cot[i], 1.0, &mut grad);
        }
        for j in 0..n {
            model.backprop(&self.positives[j], &positive_cot[j], 1.0, &mut grad);
        }
        grad
    }
}

/// The `n²` per-logit gradients `g_ij`, row-major in `(i, j)`.
#[derive(Clone, Debug)]
pub struct LogitGradientSet {
    n: usize,
    grads: Vec<Vec<f64>>,
}

impl LogitGradientSet {
    pub fn compute(model: &EmbeddingModel, batch: &PairBatch) -> Result<Self> {
        let traces = BatchTraces::new(model, batch)?;
        Ok(Self::from_traces(model, &traces))
    }

    fn from_traces(model: &EmbeddingModel, traces: &BatchTraces) -> Self {
        let n = traces.n();
        let p = model.param_count();
        let mut grads = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let mut g = vec![0.0; p];
                traces.logit_gradient(model, i, j, &mut g);
                grads.push(g);
            }
        }
        Self { n, grads }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        &self.grads[i * self.n + j]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateDiagnostics {
    pub n: usize,
    /// Batch loss `𝓛_X(w)` at the current weights.
    pub loss: f64,
    /// Number of `g_ij` whose norm exceeded the bound.
    pub clipped: usize,
    pub max_logit_grad_norm: f64,
}

/// `τ_ij` and `λ_ij = τ_ij · min{B/‖g_ij‖, 1}`, both `n × n` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaWeights {
    pub n: usize,
    pub tau: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl LambdaWeights {
    pub fn tau(&self, i: usize, j: usize) -> f64 {
        self.tau[i * self.n + j]
    }

    pub fn lambda(&self, i: usize, j: usize) -> f64 {
        self.lambda[i * self.n + j]
    }
}

fn check_bound(bound: f64) -> Result<()> {
    if !(bound >= 0.0) {
        return Err(Error::domain(format!("clip bound must be nonnegative, got {bound}")));
    }
    Ok(())
}

fn loss_and_tau(traces: &BatchTraces, family: LossFamily) -> Result<(f64, Vec<f64>)> {
    let logits = traces.logits()?;
    Ok((family.total(&logits)?, family.logit_partials(&logits)?))
}

/// `ḡ` with every `g_ij` materialized; summation is `i`-major, `j`-minor.
pub fn aggregate_direct(
    model: &EmbeddingModel,
    batch: &PairBatch,
    family: LossFamily,
    bound: f64,
) -> Result<(Vec<f64>, AggregateDiagnostics)> {
    check_bound(bound)?;
    let traces = BatchTraces::new(model, batch)?;
    let (loss, tau) = loss_and_tau(&traces, family)?;
    let set = LogitGradientSet::from_traces(model, &traces);
    let n = traces.n();
    let mut diag = AggregateDiagnostics {
        n,
        loss,
        ..Default::default()
    };
    let mut out = vec![0.0; model.param_count()];
    for i in 0..n {
        for j in 0..n {
            let g = set.get(i, j);
            let gn = norm(g);
            diag.max_logit_grad_norm = diag.max_logit_grad_norm.max(gn);
            if gn > bound {
                diag.clipped += 1;
            }
            let t = tau[i * n + j];
            if t == 0.0 {
                continue;
            }
            axpy(t * clip_scale(g, bound), g, &mut out);
        }
    }
    Ok((out, diag))
}

/// Pass 1 of the λ route: `(τ_ij, ‖g_ij‖)` for every pair, reusing a single
/// gradient buffer.
pub fn lambda_weights(
    model: &EmbeddingModel,
    traces: &BatchTraces,
    family: LossFamily,
    bound: f64,
) -> Result<(LambdaWeights, AggregateDiagnostics)> {
    check_bound(bound)?;
    let (loss, tau) = loss_and_tau(traces, family)?;
    let n = traces.n();
    let mut diag = AggregateDiagnostics {
        n,
        loss,
        ..Default::default()
    };
    let mut scratch = vec![0.0; model.param_count()];
    let mut lambda = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            traces.logit_gradient(model, i, j, &mut scratch);
            let gn = norm(&scratch);
            diag.max_logit_grad_norm = diag.max_logit_grad_norm.max(gn);
            if gn > bound {
                diag.clipped += 1;
            }
            lambda[i * n + j] = tau[i * n + j] * clip_scale(&scratch, bound);
        }
    }
    Ok((LambdaWeights { n, tau, lambda }, diag))
}

/// `ḡ = ∇F_X(w)` with the λ weights held fixed.
pub fn aggregate_lambda(
    model: &EmbeddingModel,
    batch: &PairBatch,
    family: LossFamily,
    bound: f64,
) -> Result<(Vec<f64>, AggregateDiagnostics)> {
    aggregate_accumulated(model, batch, family, bound, AggregationPath::Lambda, 1)
}

/// Aggregates with rows of the `(i, j)` sweep split into `micro_steps`
/// contiguous chunks whose partial sums are added in order.
pub fn aggregate_accumulated(
    model: &EmbeddingModel,
    batch: &PairBatch,
    family: LossFamily,
    bound: f64,
    path: AggregationPath,
    micro_steps: usize,
) -> Result<(Vec<f64>, AggregateDiagnostics)> {
    let n = batch.len();
    if micro_steps == 0 || !n.is_multiple_of(micro_steps) {
        return Err(Error::config(format!(
            "accumulation steps {micro_steps} must divide batch size {n}"
        )));
    }
    if path == AggregationPath::Direct && micro_steps == 1 {
        return aggregate_direct(model, batch, family, bound);
    }
    let traces = BatchTraces::new(model, batch)?;
    let chunk = n / micro_steps;
    match path {
        AggregationPath::Lambda => {
            let (w, diag) = lambda_weights(model, &traces, family, bound)?;
            let mut out = vec![0.0; model.param_count()];
            for c in 0..micro_steps {
                let part = traces.weighted_gradient(model, &w.lambda, c * chunk..(c + 1) * chunk);
                axpy(1.0, &part, &mut out);
            }
            Ok((out, diag))
        }
        AggregationPath::Direct => {
            check_bound(bound)?;
            let (loss, tau) = loss_and_tau(&traces, family)?;
            let mut diag = AggregateDiagnostics {
                n,
                loss,
                ..Default::default()
            };
            let p = model.param_count();
            let mut out = vec![0.0; p];
            for c in 0..micro_steps {
                let rows = c * chunk..(c + 1) * chunk;
                let grads: Vec<Vec<f64>> = rows
                    .clone()
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .map(|(i, j)| {
                        let mut g = vec![0.0; p];
                        traces.logit_gradient(model, i, j, &mut g);
                        g
                    })
                    .collect();
                let mut part = vec![0.0; p];
                for (k, g) in grads.iter().enumerate() {
                    let (i, j) = (rows.start + k / n, k % n);
                    let gn = norm(g);
                    diag.max_logit_grad_norm = diag.max_logit_grad_norm.max(gn);
                    if gn > bound {
                        diag.clipped += 1;
                    }
                    axpy(tau[i * n + j] * clip_scale(g, bound), g, &mut part);
                }
                axpy(1.0, &part, &mut out);
            }
            Ok((out, diag))
        }
    }
}

/// Exact `(𝓛_X(w), ∇_w 𝓛_X(w))` via the chain rule through the logits.
pub fn loss_gradient(model: &EmbeddingModel, batch: &PairBatch, family: LossFamily) -> Result<(f64, Vec<f64>)> {
    let traces = BatchTraces::new(model, batch)?;
    let (loss, tau) = loss_and_tau(&traces, family)?;
    let grad = traces.weighted_gradient(model, &tau, 0..traces.n());
    Ok((loss, grad))
}

fn as_matrix(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r] => Ok((*r, 1)),
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
    }
}

fn gram(t: &Tensor, rows: usize, rank: usize) -> Vec<f64> {
    let d = t.data();
    let mut g = vec![0.0; rank * rank];
    for r in 0..rows {
        let row = &d[r * rank..(r + 1) * rank];
        for a in 0..rank {
            for b in 0..rank {
                g[a * rank + b] += row[a] * row[b];
            }
        }
    }
    g
}

/// `‖U Vᵀ‖_F = √⟨UᵀU, VᵀV⟩` without forming `U Vᵀ`. Vectors are treated as
/// single-column matrices.
pub fn lowrank_norm(u: &Tensor, v: &Tensor) -> Result<f64> {
    let (ru, ku) = as_matrix(u)?;
    let (rv, kv) = as_matrix(v)?;
    if ku != kv {
        return Err(Error::shape(format!("inner dimensions {ku} and {kv} differ")));
    }
    let gu = gram(u, ru, ku);
    let gv = gram(v, rv, kv);
    let s: f64 = gu.iter().zip(&gv).map(|(a, b)| a * b).sum();
    Ok(s.max(0.0).sqrt())
}
