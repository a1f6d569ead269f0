//! Fully-connected embedding models: parameters, initialization, forward
//! passes and single-cotangent backpropagation.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer widths of a fully-connected embedding network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            embed_dim,
        }
    }

    /// Layer `(fan_in, fan_out)` pairs in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.embed_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    /// `fan_out x fan_in`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Ordered layer parameters. The flat layout is layer-major, each layer's
/// weight in row-major order followed by its bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("model needs at least one layer"));
        }
        for l in &layers {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.fan_out()] {
                return Err(Error::shape(format!("layer {} is malformed", l.name)));
            }
        }
        for w in layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::shape(format!(
                    "layer {} outputs {} but {} expects {}",
                    w[0].name,
                    w[0].fan_out(),
                    w[1].name,
                    w[1].fan_in()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.layer_dims().len();
        let layers = spec
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(k, (fan_in, fan_out))| Layer {
                name: layer_name(k, n),
                weight: Tensor::zeros(vec![fan_out, fan_in]),
                bias: Tensor::zeros(vec![fan_out]),
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn spec(&self) -> ModelSpec {
        let first = &self.layers[0];
        let last = &self.layers[self.layers.len() - 1];
        ModelSpec {
            input_dim: first.fan_in(),
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(Layer::fan_out)
                .collect(),
            embed_dim: last.fan_out(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Overwrites every parameter from a flat vector in [`flatten`](Self::flatten) order.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + w]);
            off += w;
            let b = l.bias.len();
            l.bias.data_mut().copy_from_slice(&flat[off..off + b]);
            off += b;
        }
        Ok(())
    }

    /// `w += alpha * dir` in flat order.
    pub fn add_scaled(&mut self, alpha: f64, dir: &[f64]) -> Result<()> {
        if dir.len() != self.param_count() {
            return Err(Error::shape("update length differs from parameter count"));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for t in [&mut l.weight, &mut l.bias] {
                for v in t.data_mut() {
                    *v += alpha * dir[off];
                    off += 1;
                }
            }
        }
        if self
            .layers
            .iter()
            .any(|l| l.weight.data().iter().chain(l.bias.data()).any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("parameters after update"));
        }
        Ok(())
    }

    /// SHA-256 over the little-endian flat parameters, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.flatten() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn layer_name(k: usize, count: usize) -> String {
    if k + 1 == count {
        "embedding".to_string()
    } else {
        format!("hidden{k}")
    }
}

/// Hidden layers Kaiming-normal (`std = sqrt(2 / fan_in)`), final layer
/// Xavier-normal (`std = sqrt(2 / (fan_in + fan_out))`), zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = params.layers.len();
    for (k, layer) in params.layers.iter_mut().enumerate() {
        let (fan_in, fan_out) = (layer.fan_in() as f64, layer.fan_out() as f64);
        let std = if k + 1 == count {
            (2.0 / (fan_in + fan_out)).sqrt()
        } else {
            (2.0 / fan_in).sqrt()
        };
        for w in layer.weight.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = std * z;
        }
    }
    Ok(params)
}

/// Cached per-layer values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `inputs[k]` is the input to layer `k`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last one is the embedding.
    pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn embedding(&self) -> &[f64] {
        self.pre.last().expect("trace has at least one layer")
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

/// `Φ_w`: ReLU on hidden layers, identity on the embedding layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    params: ModelParams,
}

impl EmbeddingModel {
    pub fn new(params: ModelParams) -> Self {
        Self { params }
    }

    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(Self::new(init_params(spec, seed)?))
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params.layers[0].fan_in()
    }

    pub fn embed_dim(&self) -> usize {
        self.params.layers[self.params.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Embeds every row of an `m x input_dim` matrix.
    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        if inputs.shape().len() != 2 || inputs.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "model expects rows of width {}, got shape {:?}",
                self.input_dim(),
                inputs.shape()
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::shape("forward needs at least one input row"));
        }
        let d = self.embed_dim();
        let mut out = Vec::with_capacity(inputs.rows() * d);
        for i in 0..inputs.rows() {
            out.extend(self.embed(inputs.row(i)));
        }
        Tensor::new(vec![inputs.rows(), d], out)
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let count = self.params.layers.len();
        for (k, layer) in self.params.layers.iter().enumerate() {
            let mut z = affine(layer, &h);
            if k + 1 < count {
                relu_in_place(&mut z);
            }
            h = z;
        }
        h
    }

    pub fn trace(&self, x: &[f64]) -> ForwardTrace {
        let count = self.params.layers.len();
        let mut inputs = Vec::with_capacity(count);
        let mut pre = Vec::with_capacity(count);
        let mut h = x.to_vec();
        for (k, layer) in self.params.layers.iter().enumerate() {
            let z = affine(layer, &h);
            let next = if k + 1 < count {
                let mut a = z.clone();
                relu_in_place(&mut a);
                a
            } else {
                Vec::new()
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        ForwardTrace { inputs, pre }
    }

    /// Accumulates `scale * J(x)^T cotangent` into `grad`, where `J(x)` is
    /// the Jacobian of the embedding with respect to the flat parameters.
    pub fn backprop(&self, trace: &ForwardTrace, cotangent: &[f64], scale: f64, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.param_count());
        debug_assert_eq!(cotangent.len(), self.embed_dim());
        let layers = &self.params.layers;
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for l in layers {
            offsets.push(off);
            off += l.param_count();
        }
        let mut delta: Vec<f64> = cotangent.iter().map(|c| c * scale).collect();
        for k in (0..layers.len()).rev() {
            let layer = &layers[k];
            let input = &trace.inputs[k];
            let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
            let w = layer.weight.data();
            let base = offsets[k];
            for r in 0..fan_out {
                let dr = delta[r];
                if dr == 0.0 {
                    continue;
                }
                let row = &mut grad[base + r * fan_in..base + (r + 1) * fan_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += dr * x;
                }
            }
            let bias_base = base + fan_out * fan_in;
            for r in 0..fan_out {
                grad[bias_base + r] += delta[r];
            }
            if k == 0 {
                break;
            }
            let mut prev = vec![0.0; fan_in];
            for r in 0..fan_out {
                let dr = delta[r];
                if dr == 0.0 {
                    continue;
                }
                for (p, wv) in prev.iter_mut().zip(&w[r * fan_in..(r + 1) * fan_in]) {
                    *p += wv * dr;
                }
            }
            // ReLU subgradient is 0 at exactly 0.
            for (p, z) in prev.iter_mut().zip(&trace.pre[k - 1]) {
                if *z <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut f)
    }

    /// Writes the checkpoint container: magic, little-endian `u64` header
    /// length, JSON header, then the flat parameters as little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            spec: self.params.spec(),
            layers: self
                .params
                .layers
                .iter()
                .map(|l| LayerHeader {
                    name: l.name.clone(),
                    fan_in: l.fan_in(),
                    fan_out: l.fan_out(),
                })
                .collect(),
            param_count: self.param_count(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in self.params.flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(Error::Format("checkpoint header too large".into()));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header.format_version
            )));
        }
        let mut params = ModelParams::zeros(&header.spec)?;
        if params.param_count() != header.param_count || params.layers.len() != header.layers.len() {
            return Err(Error::Format("checkpoint header is inconsistent".into()));
        }
        for (l, h) in params.layers.iter_mut().zip(&header.layers) {
            if l.fan_in() != h.fan_in || l.fan_out() != h.fan_out {
                return Err(Error::Format(format!("layer {} dims disagree", h.name)));
            }
            l.name = h.name.clone();
        }
        let mut flat = vec![0.0; header.param_count];
        let mut buf = [0u8; 8];
        for v in &mut flat {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        params.unflatten(&flat)?;
        Ok(Self::new(params))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LDPCKPT\x01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    spec: ModelSpec,
    layers: Vec<LayerHeader>,
    param_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerHeader {
    name: String,
    fan_in: usize,
    fan_out: usize,
}

fn affine(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let fan_in = layer.fan_in();
    let w = layer.weight.data();
    layer
        .bias
        .data()
        .iter()
        .enumerate()
        .map(|(r, b)| {
            b + w[r * fan_in..(r + 1) * fan_in]
                .iter()
                .zip(x)
                .map(|(a, v)| a * v)
                .sum::<f64>()
        })
        .collect()
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_layer() -> EmbeddingModel {
        // W1 = [[1, -1], [2, 0.5], [0, 1]], b1 = [0.5, -1, 0]
        // W2 = [[1, 0, 2], [-1, 1, 0]],      b2 = [0.1, 0]
        let l1 = Layer {
            name: "hidden0".into(),
            weight: Tensor::new(vec![3, 2], vec![1.0, -1.0, 2.0, 0.5, 0.0, 1.0]).unwrap(),
            bias: Tensor::new(vec![3], vec![0.5, -1.0, 0.0]).unwrap(),
        };
        let l2 = Layer {
            name: "embedding".into(),
            weight: Tensor::new(vec![2, 3], vec![1.0, 0.0, 2.0, -1.0, 1.0, 0.0]).unwrap(),
            bias: Tensor::new(vec![2], vec![0.1, 0.0]).unwrap(),
        };
        EmbeddingModel::new(ModelParams::new(vec![l1, l2]).unwrap())
    }

    #[test]
    fn identity_layer_passes_nonnegative_input() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let m = EmbeddingModel::new(
            ModelParams::new(vec![Layer {
                name: "embedding".into(),
                weight: eye,
                bias: Tensor::zeros(vec![3]),
            }])
            .unwrap(),
        );
        let x = Tensor::from_rows(&[vec![0.5, 0.0, 2.0]]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), &[0.5, 0.0, 2.0]);
    }

    #[test]
    fn zero_params_give_zero_embedding() {
        let m = EmbeddingModel::new(ModelParams::zeros(&ModelSpec::new(4, vec![5, 3], 2)).unwrap());
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0, 4.0], vec![9.0, 9.0, 9.0, 9.0]]).unwrap();
        assert!(m.forward(&x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_layer_matches_hand_computation() {
        // x = (1, 2): W1 x + b1 = (1 - 2 + 0.5, 2 + 1 - 1, 2) = (-0.5, 2, 2)
        // relu -> (0, 2, 2); W2 h + b2 = (0 + 0 + 4 + 0.1, 0 + 2 + 0) = (4.1, 2)
        let m = two_layer();
        let out = m.forward(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[4.1, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = two_layer();
        let bad = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(m.forward(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn backprop_of_single_linear_layer() {
        // d/dW_ij sum(Wx + b) = x_j, d/db_i = 1
        let m = EmbeddingModel::new(init_params(&ModelSpec::new(3, vec![], 2), 3).unwrap());
        let x = [0.3, -1.2, 2.0];
        let mut g = vec![0.0; m.param_count()];
        m.backprop(&m.trace(&x), &[1.0, 1.0], 1.0, &mut g);
        assert_eq!(g, vec![0.3, -1.2, 2.0, 0.3, -1.2, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = ModelSpec::new(6, vec![8, 8], 4);
        let a = init_params(&spec, 42).unwrap();
        let b = init_params(&spec, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().iter().all(|l| l.bias.data().iter().all(|v| *v == 0.0)));
        assert_ne!(a, init_params(&spec, 43).unwrap());
    }

    fn sample_variance(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    }

    #[test]
    fn kaiming_variance_for_hidden_layer() {
        // 200 x 100 = 2e4 weights, target variance 2/100
        let p = init_params(&ModelSpec::new(100, vec![200], 3), 7).unwrap();
        let var = sample_variance(p.layers()[0].weight.data());
        assert!((var / 0.02 - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn xavier_variance_for_embedding_layer() {
        // several 50x50 draws pooled for >= 1e4 samples, target 2/(50+50)
        let mut all = Vec::new();
        for seed in 0..5 {
            let p = init_params(&ModelSpec::new(50, vec![], 50), seed).unwrap();
            all.extend_from_slice(p.layers()[0].weight.data());
        }
        assert!(all.len() >= 10_000);
        let var = sample_variance(&all);
        assert!((var / 0.02 - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = EmbeddingModel::init(&ModelSpec::new(5, vec![7, 3], 2), 11).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = EmbeddingModel::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.params().content_hash(), m.params().content_hash());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let mut bytes: &[u8] = b"notackpt........";
        assert!(matches!(
            EmbeddingModel::read_checkpoint(&mut bytes),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trips(v in proptest::collection::vec(-1e6f64..1e6, 4 * 3 + 3 + 3 * 2 + 2)) {
            let mut p = ModelParams::zeros(&ModelSpec::new(4, vec![3], 2)).unwrap();
            p.unflatten(&v).unwrap();
            prop_assert_eq!(p.flatten(), v);
        }
    }
}
