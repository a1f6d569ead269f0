//! Tape-based reverse-mode differentiation of scalar functions of an
//! embedding model's forward passes.
//!
//! This is the general route: any scalar assembled from the supported
//! primitives can be differentiated with respect to the model parameters.
//! The training hot paths use [`EmbeddingModel::backprop`] directly; this
//! tape serves as the reference implementation they are checked against.

use crate::error::{Error, Result};
use crate::model::EmbeddingModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Const,
    Param,
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Dot(Var, Var),
    Norm(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
}

struct Node {
    value: Vec<f64>,
    /// Column count for matrix-valued params; 1 for vectors.
    cols: usize,
    op: Op,
}

/// A recording of one scalar computation over a model's parameters.
pub struct Graph<'m> {
    model: &'m EmbeddingModel,
    nodes: Vec<Node>,
    /// (weight, bias) parameter nodes per layer.
    params: Vec<(Var, Var)>,
}

impl<'m> Graph<'m> {
    pub fn new(model: &'m EmbeddingModel) -> Self {
        let mut g = Graph {
            model,
            nodes: Vec::new(),
            params: Vec::new(),
        };
        for layer in model.params().layers() {
            let w = g.push(layer.weight.data().to_vec(), layer.fan_in(), Op::Param);
            let b = g.push(layer.bias.data().to_vec(), 1, Op::Param);
            g.params.push((w, b));
        }
        g
    }

    fn push(&mut self, value: Vec<f64>, cols: usize, op: Op) -> Var {
        self.nodes.push(Node { value, cols, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn len(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn constant(&mut self, value: &[f64]) -> Var {
        self.push(value.to_vec(), 1, Op::Const)
    }

    /// Records `Φ_w(x)`.
    pub fn embed(&mut self, x: &[f64]) -> Result<Var> {
        if x.len() != self.model.input_dim() {
            return Err(Error::shape(format!(
                "input of width {} for model expecting {}",
                x.len(),
                self.model.input_dim()
            )));
        }
        let mut h = self.constant(x);
        let count = self.params.len();
        for k in 0..count {
            let (w, b) = self.params[k];
            let z = self.matvec(w, h)?;
            let z = self.add(z, b)?;
            h = if k + 1 < count { self.relu(z) } else { z };
        }
        Ok(h)
    }

    fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let cols = self.nodes[w.0].cols;
        if cols != self.len(x) {
            return Err(Error::shape("matrix-vector width mismatch"));
        }
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let out = wv
            .chunks(cols)
            .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(out, 1, Op::MatVec(w, x)))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (la, lb) = (self.len(a), self.len(b));
        let out: Vec<f64> = if la == lb {
            self.value(a)
                .iter()
                .zip(self.value(b))
                .map(|(x, y)| f(*x, *y))
                .collect()
        } else if lb == 1 {
            let y = self.value(b)[0];
            self.value(a).iter().map(|x| f(*x, y)).collect()
        } else {
            return Err(Error::shape(format!("operands of length {la} and {lb}")));
        };
        Ok(self.push(out, 1, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product; `b` may be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise quotient; `b` may be a scalar.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| c * x).collect();
        self.push(out, 1, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.max(0.0)).collect();
        self.push(out, 1, Op::Relu(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.len(a) != self.len(b) {
            return Err(Error::shape("dot of unequal lengths"));
        }
        let s = crate::tensor::dot(self.value(a), self.value(b));
        Ok(self.push(vec![s], 1, Op::Dot(a, b)))
    }

    pub fn norm(&mut self, a: Var) -> Var {
        let s = crate::tensor::norm(self.value(a));
        self.push(vec![s], 1, Op::Norm(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(out, 1, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(out, 1, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x * x).collect();
        self.push(out, 1, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], 1, Op::Sum(a))
    }

    /// Applies a unary primitive by name.
    pub fn apply(&mut self, name: &str, a: Var) -> Result<Var> {
        Ok(match name {
            "relu" => self.relu(a),
            "norm" => self.norm(a),
            "log" => self.log(a),
            "exp" => self.exp(a),
            "square" => self.square(a),
            "sum" => self.sum(a),
            other => return Err(Error::Unsupported(other.to_string())),
        })
    }

    /// Cosine similarity of two recorded vectors, built from primitives.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let ab = self.dot(a, b)?;
        let na = self.norm(a);
        let nb = self.norm(b);
        let den = self.mul(na, nb)?;
        self.div(ab, den)
    }

    /// Reverse sweep from scalar `out`; returns the flat parameter gradient.
    pub fn gradient(&self, out: Var) -> Result<Vec<f64>> {
        if self.len(out) != 1 {
            return Err(Error::shape("gradient requires a scalar output"));
        }
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        adj[out.0][0] = 1.0;
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            let a_out = std::mem::take(&mut adj[idx]);
            if a_out.iter().all(|v| *v == 0.0) {
                adj[idx] = a_out;
                continue;
            }
            match node.op {
                Op::Const | Op::Param => {}
                Op::MatVec(w, x) => {
                    let cols = self.nodes[w.0].cols;
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    for (r, g) in a_out.iter().enumerate() {
                        for c in 0..cols {
                            adj[w.0][r * cols + c] += g * xv[c];
                            adj[x.0][c] += g * wv[r * cols + c];
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    for (k, g) in a_out.iter().enumerate() {
                        adj[a.0][k] += g;
                        let kb = if self.len(b) == 1 { 0 } else { k };
                        adj[b.0][kb] += sign * g;
                    }
                }
                Op::Mul(a, b) => {
                    for (k, g) in a_out.iter().enumerate() {
                        let kb = if self.len(b) == 1 { 0 } else { k };
                        let (av, bv) = (self.value(a)[k], self.value(b)[kb]);
                        adj[a.0][k] += g * bv;
                        adj[b.0][kb] += g * av;
                    }
                }
                Op::Div(a, b) => {
                    for (k, g) in a_out.iter().enumerate() {
                        let kb = if self.len(b) == 1 { 0 } else { k };
                        let (av, bv) = (self.value(a)[k], self.value(b)[kb]);
                        adj[a.0][k] += g / bv;
                        adj[b.0][kb] -= g * av / (bv * bv);
                    }
                }
                Op::Scale(a, c) => {
                    for (k, g) in a_out.iter().enumerate() {
                        adj[a.0][k] += c * g;
                    }
                }
                Op::Relu(a) => {
                    for (k, g) in a_out.iter().enumerate() {
                        if self.value(a)[k] > 0.0 {
                            adj[a.0][k] += g;
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let g = a_out[0];
                    for k in 0..self.len(a) {
                        let (av, bv) = (self.value(a)[k], self.value(b)[k]);
                        adj[a.0][k] += g * bv;
                        adj[b.0][k] += g * av;
                    }
                }
                Op::Norm(a) => {
                    let n = node.value[0];
                    if n > 0.0 {
                        for k in 0..self.len(a) {
                            adj[a.0][k] += a_out[0] * self.value(a)[k] / n;
                        }
                    }
                }
                Op::Log(a) => {
                    for (k, g) in a_out.iter().enumerate() {
                        adj[a.0][k] += g / self.value(a)[k];
                    }
                }
                Op::Exp(a) => {
                    for (k, g) in a_out.iter().enumerate() {
                        adj[a.0][k] += g * node.value[k];
                    }
                }
                Op::Square(a) => {
                    for (k, g) in a_out.iter().enumerate() {
                        adj[a.0][k] += 2.0 * g * self.value(a)[k];
                    }
                }
                Op::Sum(a) => {
                    for v in adj[a.0].iter_mut() {
                        *v += a_out[0];
                    }
                }
            }
            adj[idx] = a_out;
        }
        let mut grad = Vec::with_capacity(self.model.param_count());
        for &(w, b) in &self.params {
            grad.extend_from_slice(&adj[w.0]);
            grad.extend_from_slice(&adj[b.0]);
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(grad)
    }
}

/// Value and parameter gradient of a scalar built by `f` on a fresh tape.
pub fn value_and_grad<F>(model: &EmbeddingModel, f: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(model);
    let out = f(&mut g)?;
    let grad = g.gradient(out)?;
    Ok((g.value(out)[0], grad))
}

/// `∇_w f(w)` for a scalar `f` recorded on the tape.
pub fn scalar_grad<F>(model: &EmbeddingModel, f: F) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var>,
{
    value_and_grad(model, f).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelSpec};

    fn model(spec: ModelSpec, seed: u64) -> EmbeddingModel {
        EmbeddingModel::new(init_params(&spec, seed).unwrap())
    }

    #[test]
    fn constant_scalar_has_zero_gradient() {
        let m = model(ModelSpec::new(3, vec![4], 2), 1);
        let g = scalar_grad(&m, |g| {
            let c = g.constant(&[2.0, 3.0]);
            Ok(g.sum(c))
        })
        .unwrap();
        assert_eq!(g.len(), m.param_count());
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_sum_gradient() {
        let m = model(ModelSpec::new(3, vec![], 2), 5);
        let x = [0.7, -0.2, 1.5];
        let g = scalar_grad(&m, |g| {
            let e = g.embed(&x)?;
            Ok(g.sum(e))
        })
        .unwrap();
        // weight (i, j) -> x_j ; bias -> 1
        assert_eq!(g, vec![0.7, -0.2, 1.5, 0.7, -0.2, 1.5, 1.0, 1.0]);
    }

    #[test]
    fn unknown_primitive_is_a_capability_error() {
        let m = model(ModelSpec::new(2, vec![], 2), 0);
        let err = scalar_grad(&m, |g| {
            let e = g.embed(&[1.0, 1.0])?;
            g.apply("tanh", e)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Unsupported(ref s) if s == "tanh"));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let m = model(ModelSpec::new(2, vec![], 2), 0);
        assert!(scalar_grad(&m, |g| g.embed(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn tape_agrees_with_direct_backprop() {
        let m = model(ModelSpec::new(4, vec![6, 5], 3), 9);
        let x = [0.3, -0.8, 1.1, 0.4];
        let cot = [0.5, -1.0, 2.0];
        let tape = scalar_grad(&m, |g| {
            let e = g.embed(&x)?;
            let c = g.constant(&cot);
            g.dot(e, c)
        })
        .unwrap();
        let mut direct = vec![0.0; m.param_count()];
        m.backprop(&m.trace(&x), &cot, 1.0, &mut direct);
        for (a, b) in tape.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn primitives_match_finite_differences() {
        // f = log(1 + exp(<e, e>)) / ||e||^2 + sum(square(e))
        let m = model(ModelSpec::new(3, vec![4], 2), 21);
        let x = [0.2, 0.9, -0.4];
        let build = |g: &mut Graph<'_>| -> Result<Var> {
            let e = g.embed(&x)?;
            let ee = g.dot(e, e)?;
            let ex = g.exp(ee);
            let one = g.constant(&[1.0]);
            let s = g.add(ex, one)?;
            let l = g.log(s);
            let n = g.norm(e);
            let n2 = g.square(n);
            let q = g.div(l, n2)?;
            let sq = g.square(e);
            let t = g.sum(sq);
            g.add(q, t)
        };
        let (_, grad) = value_and_grad(&m, build).unwrap();
        let w0 = m.params().flatten();
        let h = 1e-6;
        for k in 0..w0.len() {
            let eval = |delta: f64| {
                let mut p = m.params().clone();
                let mut w = w0.clone();
                w[k] += delta;
                p.unflatten(&w).unwrap();
                let mm = EmbeddingModel::new(p);
                value_and_grad(&mm, build).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                "k={k}: {fd} vs {}",
                grad[k]
            );
        }
    }
}
