//! k-nearest-neighbour evaluation of embeddings and confusion-matrix metrics.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::EmbeddingModel;
use crate::tensor::{dot, norm, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Euclidean,
    /// `1 − cos(a, b)`; zero vectors are treated as maximally distant.
    Cosine,
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "cosine" => Ok(Distance::Cosine),
            _ => Err(Error::config(format!("unknown distance `{s}`"))),
        }
    }
}

impl Distance {
    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Distance::Cosine => {
                let d = norm(a) * norm(b);
                if d == 0.0 {
                    2.0
                } else {
                    1.0 - dot(a, b) / d
                }
            }
        }
    }
}

/// Majority vote among the `k` nearest training rows. Equal distances go to
/// the lower training index, equal vote counts to the lower class.
pub fn knn_classify(
    train: &Tensor,
    train_labels: &[usize],
    queries: &Tensor,
    k: usize,
    distance: Distance,
) -> Result<Vec<usize>> {
    let m = train_labels.len();
    if m == 0 || train.is_empty() {
        return Err(Error::Data("k-NN needs a nonempty training set".into()));
    }
    if train.rows() != m {
        return Err(Error::shape(format!("{} training rows but {m} labels", train.rows())));
    }
    if k == 0 || k > m {
        return Err(Error::config(format!("k = {k} must lie in 1..={m}")));
    }
    if queries.shape().len() != 2 || (queries.rows() > 0 && queries.cols() != train.cols()) {
        return Err(Error::shape(format!(
            "queries {:?} do not match training dim {}",
            queries.shape(),
            train.cols()
        )));
    }
    let classes = train_labels.iter().max().map_or(0, |c| c + 1);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(m);
    let mut votes = vec![0usize; classes];
    let mut out = Vec::with_capacity(queries.rows());
    for q in 0..queries.rows() {
        let qr = queries.row(q);
        dist.clear();
        dist.extend((0..m).map(|t| (distance.eval(qr, train.row(t)), t)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < m {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        votes.iter_mut().for_each(|v| *v = 0);
        for &(_, t) in &dist[..k] {
            votes[train_labels[t]] += 1;
        }
        let mut best = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `confusion[t][p]`: points of true class `t` predicted as `p`.
    pub confusion: Vec<Vec<u64>>,
    pub total: u64,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f_beta: Vec<f64>,
    pub best_precision: f64,
    pub best_recall: f64,
    pub best_f_beta: f64,
    pub beta: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn confusion_and_metrics(truth: &[usize], pred: &[usize], num_classes: usize, beta: f64) -> Result<EvalReport> {
    if truth.len() != pred.len() {
        return Err(Error::shape(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::config(format!("beta must be positive, got {beta}")));
    }
    let k = num_classes;
    let mut c = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::Data(format!(
                "label pair ({t}, {p}) out of range for {k} classes"
            )));
        }
        c[t][p] += 1;
    }
    let total = truth.len() as u64;
    let trace: u64 = (0..k).map(|i| c[i][i]).sum();
    let b2 = beta * beta;
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f_beta = Vec::with_capacity(k);
    for i in 0..k {
        let col: u64 = (0..k).map(|t| c[t][i]).sum();
        let row: u64 = c[i].iter().sum();
        let p = ratio(c[i][i], col);
        let r = ratio(c[i][i], row);
        let den = b2 * p + r;
        precision.push(p);
        recall.push(r);
        f_beta.push(if den == 0.0 { 0.0 } else { (1.0 + b2) * p * r / den });
    }
    let best = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Ok(EvalReport {
        total,
        accuracy: ratio(trace, total),
        best_precision: best(&precision),
        best_recall: best(&recall),
        best_f_beta: best(&f_beta),
        confusion: c,
        precision,
        recall,
        f_beta,
        beta,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header row `true\pred,0,1,…`, then one row per true class.
    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut s = String::from("true\\pred");
        for p in 0..k {
            let _ = write!(s, ",{p}");
        }
        s.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{t}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Classifies `test` rows against `train` rows and scores the result.
#[allow(clippy::too_many_arguments)]
pub fn knn_report(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    num_classes: usize,
    k: usize,
    beta: f64,
    distance: Distance,
) -> Result<EvalReport> {
    let pred = knn_classify(train, train_labels, test, k, distance)?;
    confusion_and_metrics(test_labels, &pred, num_classes, beta)
}

/// k-NN settings for scoring an encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub k: usize,
    pub beta: f64,
    pub distance: Distance,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            k: 3,
            beta: 1.0,
            distance: Distance::Euclidean,
        }
    }
}

/// Embeds both sets with `model` and scores `test` against `train` by k-NN.
pub fn evaluate_model(
    model: &EmbeddingModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    let classes = train.num_classes().max(test.num_classes());
    let tr = model.forward(train.features())?;
    let te = model.forward(test.features())?;
    knn_report(
        &tr,
        train.labels(),
        &te,
        test.labels(),
        classes,
        spec.k,
        spec.beta,
        spec.distance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn query_on_train_point_gets_its_label() {
        let train = t(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 5.0]]);
        let labels = [2, 0, 1];
        let pred = knn_classify(&train, &labels, &train, 1, Distance::Euclidean).unwrap();
        assert_eq!(pred, labels);
    }

    #[test]
    fn k_equal_train_size_predicts_majority() {
        let train = t(&[vec![0.0], vec![1.0], vec![2.0], vec![9.0]]);
        let labels = [1, 0, 1, 1];
        let q = t(&[vec![0.9], vec![-4.0], vec![100.0]]);
        let pred = knn_classify(&train, &labels, &q, 4, Distance::Euclidean).unwrap();
        assert_eq!(pred, vec![1, 1, 1]);
    }

    #[test]
    fn ties_break_low() {
        // equidistant neighbours: the lower train index wins
        let train = t(&[vec![1.0], vec![-1.0]]);
        let pred = knn_classify(&train, &[1, 0], &t(&[vec![0.0]]), 1, Distance::Euclidean).unwrap();
        assert_eq!(pred, vec![1]);
        // one vote each: the lower class wins
        let pred = knn_classify(&train, &[1, 0], &t(&[vec![0.0]]), 2, Distance::Euclidean).unwrap();
        assert_eq!(pred, vec![0]);
    }

    #[test]
    fn errors() {
        let train = t(&[vec![0.0]]);
        assert!(knn_classify(&train, &[0], &train, 2, Distance::Euclidean).is_err());
        assert!(knn_classify(&train, &[0], &train, 0, Distance::Euclidean).is_err());
        assert!(knn_classify(&Tensor::zeros(vec![0, 1]), &[], &train, 1, Distance::Euclidean).is_err());
        assert!(confusion_and_metrics(&[0, 1], &[0], 2, 1.0).is_err());
        assert!(confusion_and_metrics(&[0, 2], &[0, 1], 2, 1.0).is_err());
    }

    #[test]
    fn three_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let centres = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut draw = |c: usize, count: usize| -> Vec<Vec<f64>> {
            (0..count)
                .map(|_| centres[c].iter().map(|m| m + rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let mut train = Vec::new();
        let mut tl = Vec::new();
        let mut test = Vec::new();
        let mut ql = Vec::new();
        for c in 0..3 {
            train.extend(draw(c, 10));
            tl.extend([c; 10]);
            test.extend(draw(c, 5));
            ql.extend([c; 5]);
        }
        let r = knn_report(&t(&train), &tl, &t(&test), &ql, 3, 3, 1.0, Distance::Euclidean).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let r = knn_report(&t(&train), &tl, &t(&test), &ql, 3, 3, 1.0, Distance::Cosine).unwrap();
        assert!(r.accuracy > 0.6);
    }

    #[test]
    fn perfect_confusion() {
        let truth = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let r = confusion_and_metrics(&truth, &truth, 2, 1.0).unwrap();
        assert_eq!(r.confusion, vec![vec![5, 0], vec![0, 5]]);
        assert_eq!(r.accuracy, 1.0);
        for v in r.precision.iter().chain(&r.recall).chain(&r.f_beta) {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn single_class_predictions() {
        let truth = [0, 0, 1, 1];
        let r = confusion_and_metrics(&truth, &[0; 4], 2, 1.0).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.recall[0], 1.0);
        assert_eq!(r.precision[0], 0.5);
        assert!((r.f_beta[0] - 2.0 / 3.0).abs() < 1e-15);
        // empty predicted column
        assert_eq!(r.precision[1], 0.0);
        assert_eq!(r.f_beta[1], 0.0);
        assert_eq!(r.best_f_beta, r.f_beta[0]);
    }

    #[test]
    fn csv_layout() {
        let r = confusion_and_metrics(&[0, 1, 1], &[0, 0, 1], 2, 1.0).unwrap();
        assert_eq!(r.confusion_csv(), "true\\pred,0,1\n0,1,0\n1,1,1\n");
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn report_invariants(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
            seed in any::<u64>(),
            beta in 0.25f64..4.0,
        ) {
            let (truth, pred): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let r = confusion_and_metrics(&truth, &pred, 4, beta).unwrap();
            let sum: u64 = r.confusion.iter().flatten().sum();
            prop_assert_eq!(sum, truth.len() as u64);
            let trace: u64 = (0..4).map(|i| r.confusion[i][i]).sum();
            prop_assert_eq!(r.accuracy, trace as f64 / sum as f64);
            for v in r.precision.iter().chain(&r.recall).chain(&r.f_beta) {
                prop_assert!((0.0..=1.0).contains(v));
            }
            let mut shuffled = pairs.clone();
            rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
            let (t2, p2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            prop_assert_eq!(confusion_and_metrics(&t2, &p2, 4, beta).unwrap(), r);
        }
    }
}
