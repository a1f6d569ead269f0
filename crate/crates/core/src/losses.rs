//! Cosine logits and the contrastive / spreadout loss families.
//!
//! Row indices are 0-based: `value(i, z)` is the loss attached to anchor `i`
//! given its row `z` of logits against every positive in the batch.

use serde::{Deserialize, Serialize};

use crate::data::PairBatch;
use crate::error::{Error, Result};
use crate::model::EmbeddingModel;
use crate::tensor::{dot, norm, Tensor};

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine of unequal lengths"));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu <= 0.0 {
        return Err(Error::DegenerateEmbedding {
            role: "first",
            index: 0,
        });
    }
    if nv <= 0.0 {
        return Err(Error::DegenerateEmbedding {
            role: "second",
            index: 0,
        });
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity and its gradients with respect to `u` and `v`.
/// Both norms must be positive.
pub(crate) fn cosine_with_grads(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (nu, nv) = (norm(u), norm(v));
    let c = dot(u, v) / (nu * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(a, b)| b / (nu * nv) - c * a / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(a, b)| a / (nu * nv) - c * b / (nv * nv))
        .collect();
    (c.clamp(-1.0, 1.0), du, dv)
}

/// `Z[i][j] = S(Φ(x_i), Φ(x'_j))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix {
    n: usize,
    z: Vec<f64>,
}

impl LogitMatrix {
    pub fn from_embeddings(anchors: &[Vec<f64>], positives: &[Vec<f64>]) -> Result<Self> {
        let n = anchors.len();
        if n == 0 || positives.len() != n {
            return Err(Error::shape("logit matrix needs n >= 1 anchors and n positives"));
        }
        check_nondegenerate("anchor", anchors)?;
        check_nondegenerate("positive", positives)?;
        let mut z = Vec::with_capacity(n * n);
        for a in anchors {
            for p in positives {
                z.push(cosine_similarity(a, p)?);
            }
        }
        Ok(Self { n, z })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.n..(i + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.z[i * self.n + j]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.z.clone()).expect("logits are finite")
    }
}

pub(crate) fn check_nondegenerate(role: &'static str, embeddings: &[Vec<f64>]) -> Result<()> {
    match embeddings.iter().position(|e| norm(e) <= 0.0) {
        Some(index) => Err(Error::DegenerateEmbedding { role, index }),
        None => Ok(()),
    }
}

pub fn logit_matrix(model: &EmbeddingModel, batch: &PairBatch) -> Result<LogitMatrix> {
    let (anchors, positives) = embed_batch(model, batch)?;
    LogitMatrix::from_embeddings(&anchors, &positives)
}

type Rows = Vec<Vec<f64>>;

pub(crate) fn embed_batch(model: &EmbeddingModel, batch: &PairBatch) -> Result<(Rows, Rows)> {
    if batch.dim() != model.input_dim() {
        return Err(Error::shape(format!(
            "batch features have width {}, model expects {}",
            batch.dim(),
            model.input_dim()
        )));
    }
    let anchors = (0..batch.len()).map(|i| model.embed(batch.anchor(i))).collect();
    let positives = (0..batch.len()).map(|i| model.embed(batch.positive(i))).collect();
    Ok((anchors, positives))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    Contrastive,
    Spreadout,
}

impl std::str::FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(Self::Contrastive),
            "spreadout" => Ok(Self::Spreadout),
            other => Err(Error::config(format!("unknown loss family `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Contrastive => "contrastive",
            Self::Spreadout => "spreadout",
        })
    }
}

impl LossFamily {
    pub fn value(self, i: usize, z: &[f64]) -> Result<f64> {
        match self {
            Self::Contrastive => contrastive_value(i, z),
            Self::Spreadout => spreadout_value(i, z),
        }
    }

    pub fn partials(self, i: usize, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Contrastive => contrastive_partials(i, z),
            Self::Spreadout => spreadout_partials(i, z),
        }
    }

    /// Smallest batch size for which the family is defined.
    pub fn min_batch(self) -> usize {
        match self {
            Self::Contrastive => 1,
            Self::Spreadout => 2,
        }
    }

    /// Row partials `τ[i][j] = ∂ℓ^{(i,n)}/∂Z_ij`, row-major.
    pub fn logit_partials(self, logits: &LogitMatrix) -> Result<Vec<f64>> {
        let mut tau = Vec::with_capacity(logits.n() * logits.n());
        for i in 0..logits.n() {
            tau.extend(self.partials(i, logits.row(i))?);
        }
        Ok(tau)
    }

    /// `Σ_i ℓ^{(i,n)}(Z_i)`.
    pub fn total(self, logits: &LogitMatrix) -> Result<f64> {
        (0..logits.n()).map(|i| self.value(i, logits.row(i))).sum()
    }
}

fn check_row(i: usize, z: &[f64]) -> Result<()> {
    if i >= z.len() {
        return Err(Error::domain(format!("row index {i} outside batch of {}", z.len())));
    }
    Ok(())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log Σ_j e^{z_j} − z_i`.
pub fn contrastive_value(i: usize, z: &[f64]) -> Result<f64> {
    check_row(i, z)?;
    if z.len() == 1 {
        return Ok(0.0);
    }
    Ok(log_sum_exp(z) - z[i])
}

/// `softmax(z) − e_i`.
pub fn contrastive_partials(i: usize, z: &[f64]) -> Result<Vec<f64>> {
    check_row(i, z)?;
    let mut p = softmax(z);
    p[i] -= 1.0;
    Ok(p)
}

/// `Σ_{j≠i} z_j² / (n − 1)`.
pub fn spreadout_value(i: usize, z: &[f64]) -> Result<f64> {
    check_row(i, z)?;
    let n = z.len();
    if n < 2 {
        return Err(Error::domain("spreadout loss is undefined for a single pair"));
    }
    let s: f64 = z.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v * v).sum();
    Ok(s / (n - 1) as f64)
}

pub fn spreadout_partials(i: usize, z: &[f64]) -> Result<Vec<f64>> {
    check_row(i, z)?;
    let n = z.len();
    if n < 2 {
        return Err(Error::domain("spreadout loss is undefined for a single pair"));
    }
    let k = 2.0 / (n - 1) as f64;
    Ok(z.iter()
        .enumerate()
        .map(|(j, v)| if j == i { 0.0 } else { k * v })
        .collect())
}

/// `𝓛_X(w) = Σ_i ℓ^{(i,n)}(Z_X^{(i,n)}(w))`.
pub fn batch_loss(model: &EmbeddingModel, batch: &PairBatch, family: LossFamily) -> Result<f64> {
    family.total(&logit_matrix(model, batch)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(close(
            cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            1e-15
        ));
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn cosine_is_clamped() {
        let u = [0.1, 0.2, 0.3];
        let c = cosine_similarity(&u, &u).unwrap();
        assert!(c <= 1.0);
    }

    #[test]
    fn contrastive_examples() {
        assert!(close(contrastive_value(0, &[0.0; 4]).unwrap(), 4f64.ln(), 1e-15));
        assert_eq!(contrastive_value(0, &[0.7]).unwrap(), 0.0);
        // log(e + 2/e) - 1
        let want = (1f64.exp() + 2.0 * (-1f64).exp()).ln() - 1.0;
        assert!(close(contrastive_value(0, &[1.0, -1.0, -1.0]).unwrap(), want, 1e-15));
        assert!(close(want, 0.2395, 1e-3));
    }

    #[test]
    fn contrastive_partials_at_uniform_softmax() {
        let p = contrastive_partials(0, &[0.0; 4]).unwrap();
        assert_eq!(p, vec![-0.75, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn spreadout_examples() {
        let z = [0.5, 0.2, -0.1];
        assert!(close(spreadout_value(0, &z).unwrap(), 0.025, 1e-16));
        let p = spreadout_partials(0, &z).unwrap();
        assert_eq!(p[0], 0.0);
        assert!(close(p[1], 0.2, 1e-16) && close(p[2], -0.1, 1e-16));
        let zero_off = [0.9, 0.0, 0.0];
        assert_eq!(spreadout_value(0, &zero_off).unwrap(), 0.0);
        assert!(spreadout_partials(0, &zero_off).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn spreadout_needs_two_pairs() {
        assert!(matches!(spreadout_value(0, &[0.3]), Err(Error::Domain(_))));
        assert!(matches!(spreadout_partials(0, &[0.3]), Err(Error::Domain(_))));
    }

    #[test]
    fn row_index_out_of_range() {
        assert!(contrastive_value(3, &[0.0; 3]).is_err());
    }

    fn fd(f: impl Fn(&[f64]) -> f64, z: &[f64], j: usize) -> f64 {
        let h = 1e-5;
        let mut zp = z.to_vec();
        zp[j] += h;
        let mut zm = z.to_vec();
        zm[j] -= h;
        (f(&zp) - f(&zm)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn contrastive_partials_sum_to_zero(z in proptest::collection::vec(-1.0f64..1.0, 1..16), i in 0usize..16) {
            let i = i % z.len();
            let s: f64 = contrastive_partials(i, &z).unwrap().iter().sum();
            prop_assert!(s.abs() < 1e-12);
        }

        #[test]
        fn partials_match_finite_differences(z in proptest::collection::vec(-1.0f64..1.0, 2..12), i in 0usize..12) {
            let i = i % z.len();
            for fam in [LossFamily::Contrastive, LossFamily::Spreadout] {
                let p = fam.partials(i, &z).unwrap();
                for j in 0..z.len() {
                    let num = fd(|zz| fam.value(i, zz).unwrap(), &z, j);
                    prop_assert!((num - p[j]).abs() < 1e-8, "{fam} j={j}: {num} vs {}", p[j]);
                }
            }
        }

        #[test]
        fn contrastive_witnesses(z in proptest::collection::vec(-1.0f64..1.0, 2..12)) {
            // With p_last = softmax(z)_last:
            //   Σ_j |∂ℓ^{(last)}/∂z_j| = 2(1 − p_last)
            //   Σ_i |∂ℓ^{(i)}/∂z_last| over the other rows = (n − 1) p_last   (same row z reused)
            let n = z.len();
            let last = n - 1;
            let p_last = softmax(&z)[last];
            let g1: f64 = contrastive_partials(last, &z).unwrap().iter().map(|v| v.abs()).sum();
            prop_assert!((g1 - 2.0 * (1.0 - p_last)).abs() < 1e-10);
            let g2: f64 = (0..last).map(|i| contrastive_partials(i, &z).unwrap()[last].abs()).sum();
            prop_assert!((g2 - (n - 1) as f64 * p_last).abs() < 1e-10);
        }
    }
}
