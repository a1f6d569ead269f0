//! Sensitivity constants of the clipped logit aggregate and a brute-force
//! empirical check over add/remove-one neighboring batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregation::aggregate_direct;
use crate::data::PairBatch;
use crate::error::{Error, Result};
use crate::losses::LossFamily;
use crate::model::{init_params, EmbeddingModel, ModelSpec};
use crate::tensor::Tensor;

/// How the `L` term is weighted in the combined sensitivity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// `(G1 + G2 + (n − 1)L)·B`
    #[default]
    Tight,
    /// `(G1 + G2 + nL)·B`
    ConservativeNL,
}

/// `G1`, `G2`, `L` for a loss family at batch size `n`, with `B` factored out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitConstants {
    pub n: usize,
    pub g1: f64,
    pub g2: f64,
    pub l: f64,
}

impl LogitConstants {
    pub fn combined_sum(&self, mode: BoundMode) -> f64 {
        let k = match mode {
            BoundMode::Tight => (self.n - 1) as f64,
            BoundMode::ConservativeNL => self.n as f64,
        };
        self.g1 + self.g2 + k * self.l
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::domain(format!("sensitivity constants need n >= 2, got {n}")));
    }
    Ok(())
}

/// Contrastive loss under cosine similarity. With
/// `q = e² / (e² + n − 1)` (the largest softmax weight a single off-diagonal
/// logit can take when every logit lies in `[−1, 1]`):
/// `G1 = 2(1 − q)`, `G2 = (n − 1)q`, `L = q`, so the combined sum is
/// `2(1 + (n − 2)e² / (e² + n − 1))`.
pub fn contrastive_constants(n: usize) -> Result<LogitConstants> {
    check_n(n)?;
    let e2 = std::f64::consts::E.powi(2);
    let q = e2 / (e2 + (n - 1) as f64);
    Ok(LogitConstants {
        n,
        g1: 2.0 * (1.0 - q),
        g2: (n - 1) as f64 * q,
        l: q,
    })
}

/// Spreadout loss under cosine similarity: `G1 = G2 = 2`, `L = 2/(n − 1)`,
/// combined sum 6 for every `n`.
pub fn spreadout_constants(n: usize) -> Result<LogitConstants> {
    check_n(n)?;
    Ok(LogitConstants {
        n,
        g1: 2.0,
        g2: 2.0,
        l: 2.0 / (n - 1) as f64,
    })
}

pub fn family_constants(family: LossFamily, n: usize) -> Result<LogitConstants> {
    match family {
        LossFamily::Contrastive => contrastive_constants(n),
        LossFamily::Spreadout => spreadout_constants(n),
    }
}

/// `C = (G1 + G2 + (n − 1)L)·B` (or `nL` in conservative mode).
pub fn combined_sensitivity(constants: &LogitConstants, bound: f64, mode: BoundMode) -> Result<f64> {
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::domain(format!(
            "clip bound must be positive and finite, got {bound}"
        )));
    }
    Ok(constants.combined_sum(mode) * bound)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConstants {
    pub constants: LogitConstants,
    pub bound: f64,
    pub sensitivity: f64,
    pub mode: BoundMode,
}

impl SensitivityConstants {
    pub fn new(family: LossFamily, n: usize, bound: f64, mode: BoundMode) -> Result<Self> {
        let constants = family_constants(family, n)?;
        Ok(Self {
            constants,
            bound,
            sensitivity: combined_sensitivity(&constants, bound, mode)?,
            mode,
        })
    }
}

/// Shape of the random models probed by the oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub input_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden: 16,
            embed_dim: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub family: LossFamily,
    pub n: usize,
    pub bound: f64,
    pub trials: usize,
    pub skipped: usize,
    /// Largest `‖ḡ(X) − ḡ(X°)‖` observed.
    pub max_distance: f64,
    /// Analytic `C` for the same `(n, B)`.
    pub analytic: f64,
}

impl OracleOutcome {
    pub fn margin(&self) -> f64 {
        self.analytic - self.max_distance
    }
}

/// Clipped aggregate on a batch, extended to batches where the family is
/// undefined (a single spreadout pair has no off-diagonal terms) as zero.
fn clipped_aggregate(model: &EmbeddingModel, batch: &PairBatch, family: LossFamily, bound: f64) -> Result<Vec<f64>> {
    if batch.len() < family.min_batch() {
        return Ok(vec![0.0; model.param_count()]);
    }
    Ok(aggregate_direct(model, batch, family, bound)?.0)
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Tensor {
    let data = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![n, dim], data).expect("gaussian draws are finite")
}

/// Maximum `‖ḡ(X) − ḡ(X°)‖` over `trials` random draws of weights
/// (standard initializer) and unit-Gaussian inputs, `X°` being `X` without its
/// last pair. Draws producing a zero-norm embedding are resampled.
pub fn empirical_sensitivity(
    family: LossFamily,
    n: usize,
    bound: f64,
    trials: usize,
    seed: u64,
    probe: &ProbeSpec,
    mode: BoundMode,
) -> Result<OracleOutcome> {
    check_n(n)?;
    if trials == 0 {
        return Err(Error::config("oracle needs at least one trial"));
    }
    if !(bound >= 0.0) {
        return Err(Error::domain(format!("clip bound must be nonnegative, got {bound}")));
    }
    let spec = ModelSpec::new(probe.input_dim, vec![probe.hidden], probe.embed_dim);
    let analytic = family_constants(family, n)?.combined_sum(mode) * bound;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    let mut skipped = 0;
    let mut max_distance: f64 = 0.0;
    while done < trials {
        let model = EmbeddingModel::new(init_params(&spec, rng.random())?);
        let batch = PairBatch::new(
            gaussian_rows(&mut rng, n, probe.input_dim),
            gaussian_rows(&mut rng, n, probe.input_dim),
        )?;
        let outcome = clipped_aggregate(&model, &batch, family, bound).and_then(|full| {
            let reduced = clipped_aggregate(&model, &batch.prefix(n - 1)?, family, bound)?;
            Ok(full
                .iter()
                .zip(&reduced)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt())
        });
        match outcome {
            Ok(d) => {
                max_distance = max_distance.max(d);
                done += 1;
            }
            Err(Error::DegenerateLogit { .. }) | Err(Error::DegenerateEmbedding { .. }) => {
                skipped += 1;
                if skipped > trials {
                    return Err(Error::Data(format!(
                        "more than half of the oracle draws were degenerate ({skipped} skipped)"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(OracleOutcome {
        family,
        n,
        bound,
        trials,
        skipped,
        max_distance,
        analytic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e2() -> f64 {
        std::f64::consts::E.powi(2)
    }

    #[test]
    fn contrastive_values() {
        let c2 = contrastive_constants(2).unwrap().combined_sum(BoundMode::Tight);
        assert!((c2 - 2.0).abs() < 1e-15);
        let c10 = contrastive_constants(10).unwrap().combined_sum(BoundMode::Tight);
        let want = 2.0 * (1.0 + 8.0 * e2() / (e2() + 9.0));
        assert!((c10 - want).abs() < 1e-12);
        assert!((c10 - 9.2136).abs() < 1e-3);
        let sup = 2.0 * (1.0 + e2());
        assert!((sup - 16.7781).abs() < 1e-3);
        assert!(contrastive_constants(1_000_000).unwrap().combined_sum(BoundMode::Tight) < sup);
    }

    #[test]
    fn contrastive_is_monotone_and_bounded() {
        let mut prev = 0.0;
        for n in 2..2000 {
            let c = contrastive_constants(n).unwrap().combined_sum(BoundMode::Tight);
            assert!(c >= prev);
            assert!(c <= 16.7782);
            prev = c;
        }
    }

    #[test]
    fn spreadout_is_six() {
        for n in [2, 3, 17, 1000] {
            let c = spreadout_constants(n).unwrap().combined_sum(BoundMode::Tight);
            assert!((c - 6.0).abs() < 1e-12, "n={n}: {c}");
        }
        let c = combined_sensitivity(&spreadout_constants(9).unwrap(), 0.5, BoundMode::Tight).unwrap();
        assert!((c - 3.0).abs() < 1e-12);
    }

    #[test]
    fn combined_examples_and_errors() {
        let c = LogitConstants {
            n: 5,
            g1: 1.0,
            g2: 1.0,
            l: 0.0,
        };
        assert_eq!(combined_sensitivity(&c, 2.0, BoundMode::Tight).unwrap(), 4.0);
        assert!(combined_sensitivity(&c, 0.0, BoundMode::Tight).is_err());
        assert!(combined_sensitivity(&c, -1.0, BoundMode::Tight).is_err());
        let k = contrastive_constants(2).unwrap();
        assert!((combined_sensitivity(&k, 1.0, BoundMode::Tight).unwrap() - 2.0).abs() < 1e-15);
        assert!(contrastive_constants(1).is_err());
        assert!(spreadout_constants(0).is_err());
    }

    #[test]
    fn conservative_mode_dominates() {
        for n in 2..50 {
            for fam in [LossFamily::Contrastive, LossFamily::Spreadout] {
                let c = family_constants(fam, n).unwrap();
                assert!(c.combined_sum(BoundMode::ConservativeNL) >= c.combined_sum(BoundMode::Tight));
            }
        }
    }

    #[test]
    fn zero_bound_oracle_is_zero() {
        let o = empirical_sensitivity(
            LossFamily::Contrastive,
            4,
            0.0,
            5,
            1,
            &ProbeSpec::default(),
            BoundMode::Tight,
        )
        .unwrap();
        assert_eq!(o.max_distance, 0.0);
    }

    #[test]
    fn small_oracle_sweep_respects_bounds() {
        for fam in [LossFamily::Contrastive, LossFamily::Spreadout] {
            for n in [2, 3, 6] {
                let o = empirical_sensitivity(fam, n, 0.5, 40, 7, &ProbeSpec::default(), BoundMode::Tight).unwrap();
                assert!(o.max_distance <= o.analytic + 1e-9, "{fam} n={n}: {o:?}");
                assert!(o.max_distance > 0.0);
            }
        }
    }
}
