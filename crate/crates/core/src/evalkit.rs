//! Downstream evaluation: a one-vs-rest linear SVM with squared hinge loss,
//! Euclidean retrieval and the usual metrics.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::network::PyramidDescriptor;
use crate::optim::{self, LbfgsbOptions};

impl AsRef<[f64]> for PyramidDescriptor {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Standardization below this deviation drops the dimension.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    pub regularization: f64,
    /// Length of the first optimizer step.
    pub step: f64,
    pub memory: usize,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            regularization: 1.0,
            step: 0.1,
            memory: 10,
            tolerance: 1e-5,
            max_iter: 500,
        }
    }
}

/// Per-dimension standardization learned from training features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub retained: Vec<bool>,
}

impl Standardizer {
    pub fn fit<T: AsRef<[f64]>>(features: &[T]) -> Result<Self> {
        let dim = check_matrix(features)?;
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f.as_ref()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f.as_ref()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        let retained = std.iter().map(|&s| s >= MIN_STD).collect();
        Ok(Self { mean, std, retained })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(self.std.iter().zip(&self.retained))
            .map(|((v, m), (s, &keep))| if keep { (v - m) / s } else { 0.0 })
            .collect()
    }
}

/// A trained one-vs-rest linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub labels: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub standardizer: Standardizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: String,
    /// One score per class, in `ClassifierParams::labels` order.
    pub scores: Vec<f64>,
}

fn check_matrix<T: AsRef<[f64]>>(features: &[T]) -> Result<usize> {
    let dim = features
        .first()
        .map(|f| f.as_ref().len())
        .ok_or_else(|| Error::invalid("empty feature matrix"))?;
    if dim == 0 {
        return Err(Error::invalid("features have zero dimensions"));
    }
    for (i, f) in features.iter().enumerate() {
        let f = f.as_ref();
        if f.len() != dim {
            return Err(Error::invalid(format!("row {i} has {} features, expected {dim}", f.len())));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("row {i} has a non-finite feature")));
        }
    }
    Ok(dim)
}

/// `λ‖w‖² + (1/n) Σ max(0, 1 - y (wᵀx + b))²` on standardized features,
/// with its gradient written to `grad` (`[w..., b]`).
fn svm_loss(x: &[Vec<f64>], y: &[f64], lambda: f64, params: &[f64], grad: &mut [f64]) -> f64 {
    let dim = params.len() - 1;
    let (w, b) = (&params[..dim], params[dim]);
    let inv_n = 1.0 / x.len() as f64;
    let mut loss = lambda * w.iter().map(|v| v * v).sum::<f64>();
    for (g, wi) in grad[..dim].iter_mut().zip(w) {
        *g = 2.0 * lambda * wi;
    }
    grad[dim] = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let score = xi.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
        let margin = 1.0 - yi * score;
        if margin > 0.0 {
            loss += inv_n * margin * margin;
            let c = -2.0 * inv_n * yi * margin;
            for (g, v) in grad[..dim].iter_mut().zip(xi) {
                *g += c * v;
            }
            grad[dim] += c;
        }
    }
    loss
}

/// Value of the training objective of class `class` at the given weights.
pub fn svm_objective<T: AsRef<[f64]>>(
    params: &ClassifierParams,
    class: usize,
    weights: &[f64],
    bias: f64,
    features: &[T],
    labels: &[String],
    regularization: f64,
) -> f64 {
    let x: Vec<Vec<f64>> = features.iter().map(|f| params.standardizer.apply(f.as_ref())).collect();
    let y: Vec<f64> = labels
        .iter()
        .map(|l| if *l == params.labels[class] { 1.0 } else { -1.0 })
        .collect();
    let mut p = weights.to_vec();
    p.push(bias);
    let mut g = vec![0.0; p.len()];
    svm_loss(&x, &y, regularization, &p, &mut g)
}

/// Trains one binary squared-hinge SVM per class on standardized features.
pub fn train_svm<T: AsRef<[f64]>>(features: &[T], labels: &[String], config: &SvmConfig) -> Result<ClassifierParams> {
    let dim = check_matrix(features)?;
    if labels.len() != features.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.len()
        )));
    }
    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::invalid("classification needs at least two classes"));
    }
    if !(config.regularization > 0.0) || !(config.step > 0.0) {
        return Err(Error::invalid("regularization and step must be positive"));
    }
    let standardizer = Standardizer::fit(features)?;
    let x: Vec<Vec<f64>> = features.iter().map(|f| standardizer.apply(f.as_ref())).collect();
    let opts = LbfgsbOptions {
        memory: config.memory,
        pg_tol: config.tolerance,
        max_iter: config.max_iter,
        initial_step: config.step,
        max_backtracks: 40,
    };
    let lower = vec![f64::NEG_INFINITY; dim + 1];
    let upper = vec![f64::INFINITY; dim + 1];

    let mut weights = Vec::with_capacity(classes.len());
    let mut biases = Vec::with_capacity(classes.len());
    for class in &classes {
        let y: Vec<f64> = labels.iter().map(|l| if l == class { 1.0 } else { -1.0 }).collect();
        let min = optim::minimize(
            |p, g| svm_loss(&x, &y, config.regularization, p, g),
            &vec![0.0; dim + 1],
            &lower,
            &upper,
            &opts,
        )?;
        biases.push(min.x[dim]);
        weights.push(min.x[..dim].to_vec());
    }
    Ok(ClassifierParams {
        labels: classes,
        weights,
        biases,
        standardizer,
    })
}

/// Scores every class and picks the best; ties go to the earlier class.
pub fn predict<T: AsRef<[f64]>>(features: &[T], params: &ClassifierParams) -> Result<Vec<Prediction>> {
    features
        .iter()
        .map(|f| {
            let f = f.as_ref();
            if f.len() != params.standardizer.dim() {
                return Err(Error::invalid(format!(
                    "feature dimension {} does not match classifier dimension {}",
                    f.len(),
                    params.standardizer.dim()
                )));
            }
            let x = params.standardizer.apply(f);
            let scores: Vec<f64> = params
                .weights
                .iter()
                .zip(&params.biases)
                .map(|(w, b)| w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b)
                .collect();
            let mut best = 0;
            for (i, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = i;
                }
            }
            Ok(Prediction {
                label: params.labels[best].clone(),
                scores,
            })
        })
        .collect()
}

/// A gallery ranked by distance to one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub query: usize,
    /// Gallery indices, nearest first.
    pub ranking: Vec<usize>,
    /// Distance of each ranked item, aligned with `ranking`.
    pub distances: Vec<f64>,
    /// Relevance of each ranked item, aligned with `ranking`.
    pub relevant: Vec<bool>,
}

impl RetrievalRun {
    /// Marks ranked items relevant when `is_relevant(gallery_index)` holds.
    pub fn with_relevance(mut self, is_relevant: impl Fn(usize) -> bool) -> Self {
        self.relevant = self.ranking.iter().map(|&i| is_relevant(i)).collect();
        self
    }
}

/// Orders the gallery by ascending Euclidean distance to `query`; equal
/// distances keep gallery order.
pub fn rank_by_euclidean<Q: AsRef<[f64]>, G: AsRef<[f64]>>(
    query_id: usize,
    query: &Q,
    gallery: &[G],
) -> Result<RetrievalRun> {
    let q = query.as_ref();
    let mut scored = Vec::with_capacity(gallery.len());
    for (i, g) in gallery.iter().enumerate() {
        let g = g.as_ref();
        if g.len() != q.len() {
            return Err(Error::invalid(format!(
                "gallery item {i} has length {}, query has {}",
                g.len(),
                q.len()
            )));
        }
        let d = q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        scored.push((d, i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(RetrievalRun {
        query: query_id,
        ranking: scored.iter().map(|s| s.1).collect(),
        distances: scored.iter().map(|s| s.0).collect(),
        relevant: vec![false; scored.len()],
    })
}

/// Fraction of relevant items among the first `q` retrieved.
pub fn precision_at_q(run: &RetrievalRun, q: usize) -> Result<f64> {
    if q == 0 || q > run.relevant.len() {
        return Err(Error::invalid(format!(
            "Q = {q} outside 1..={}",
            run.relevant.len()
        )));
    }
    let hits = run.relevant[..q].iter().filter(|&&r| r).count();
    Ok(hits as f64 / q as f64)
}

pub fn top1_accuracy<T: PartialEq>(predictions: &[T], truths: &[T]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy of an empty prediction set"));
    }
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Area under the ROC curve as the Mann–Whitney statistic,
/// `(wins + ties/2) / (positives · negatives)`, computed from tie-averaged
/// ranks.
pub fn roc_auc(scores: &[f64], truths: &[bool]) -> Result<f64> {
    if scores.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} truths",
            scores.len(),
            truths.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let pos = truths.iter().filter(|&&t| t).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| truths[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn separable() -> (Vec<Vec<f64>>, Vec<String>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..10 {
            x.push(vec![-1.0 - 0.01 * i as f64]);
            y.push("a".to_string());
            x.push(vec![1.0 + 0.01 * i as f64]);
            y.push("b".to_string());
        }
        (x, y)
    }

    #[test]
    fn separable_one_dimensional() {
        let (x, y) = separable();
        let params = train_svm(&x, &y, &SvmConfig::default()).unwrap();
        assert_eq!(params.labels, labels(&["a", "b"]));
        let pred: Vec<String> = predict(&x, &params).unwrap().into_iter().map(|p| p.label).collect();
        assert_eq!(top1_accuracy(&pred, &y).unwrap(), 1.0);
        let far = predict(&[vec![-50.0]], &params).unwrap();
        assert_eq!(far[0].label, "a");
    }

    #[test]
    fn duplicated_samples_give_same_scores() {
        let (x, y) = separable();
        let a = train_svm(&x, &y, &SvmConfig::default()).unwrap();
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<String> = y.iter().chain(&y).cloned().collect();
        let b = train_svm(&x2, &y2, &SvmConfig::default()).unwrap();
        let probe: Vec<Vec<f64>> = (-5..=5).map(|k| vec![k as f64 * 0.4]).collect();
        for (p, q) in predict(&probe, &a).unwrap().iter().zip(predict(&probe, &b).unwrap()) {
            for (s, t) in p.scores.iter().zip(&q.scores) {
                assert!((s - t).abs() < 1e-6, "{s} vs {t}");
            }
        }
    }

    #[test]
    fn xor_is_not_linearly_separable() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let y = labels(&["p", "p", "q", "q"]);
        let params = train_svm(&x, &y, &SvmConfig::default()).unwrap();
        let pred: Vec<String> = predict(&x, &params).unwrap().into_iter().map(|p| p.label).collect();
        assert!(top1_accuracy(&pred, &y).unwrap() <= 0.75);
    }

    #[test]
    fn svm_objective_beats_zero() {
        let (x, y) = separable();
        let cfg = SvmConfig::default();
        let params = train_svm(&x, &y, &cfg).unwrap();
        for c in 0..2 {
            let at_opt = svm_objective(&params, c, &params.weights[c], params.biases[c], &x, &y, 1.0);
            let at_zero = svm_objective(&params, c, &[0.0], 0.0, &x, &y, 1.0);
            assert!(at_opt <= at_zero);
        }
    }

    #[test]
    fn svm_gradient_matches_finite_differences() {
        let x = vec![vec![0.3, -1.2], vec![1.5, 0.2], vec![-0.7, 0.9]];
        let y = vec![1.0, -1.0, 1.0];
        let p = vec![0.4, -0.3, 0.1];
        let mut g = vec![0.0; 3];
        svm_loss(&x, &y, 0.7, &p, &mut g);
        for k in 0..3 {
            let h = 1e-6;
            let mut a = p.clone();
            let mut b = p.clone();
            a[k] += h;
            b[k] -= h;
            let mut scratch = vec![0.0; 3];
            let fd = (svm_loss(&x, &y, 0.7, &a, &mut scratch) - svm_loss(&x, &y, 0.7, &b, &mut scratch)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(train_svm(&x, &labels(&["a", "a"]), &SvmConfig::default()).is_err());
    }

    #[test]
    fn symmetric_tie_goes_to_first_class() {
        let params = ClassifierParams {
            labels: labels(&["first", "second"]),
            weights: vec![vec![1.0, -2.0], vec![-1.0, 2.0]],
            biases: vec![0.0, 0.0],
            standardizer: Standardizer {
                mean: vec![0.0, 0.0],
                std: vec![1.0, 1.0],
                retained: vec![true, true],
            },
        };
        let p = predict(&[vec![0.0, 0.0]], &params).unwrap();
        assert_eq!(p[0].label, "first");
        assert!(predict(&[vec![0.0]], &params).is_err());
    }

    #[test]
    fn constant_dimensions_are_dropped() {
        let s = Standardizer::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(s.retained, vec![true, false]);
        assert_eq!(s.apply(&[2.0, 9.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn ranking_examples() {
        let gallery = vec![vec![2.0], vec![1.0], vec![3.0]];
        let run = rank_by_euclidean(0, &vec![0.0], &gallery).unwrap();
        assert_eq!(run.ranking, vec![1, 0, 2]);
        assert_eq!(run.distances, vec![1.0, 2.0, 3.0]);
        let run = rank_by_euclidean(0, &vec![3.0], &gallery).unwrap();
        assert_eq!((run.ranking[0], run.distances[0]), (2, 0.0));
        assert!(rank_by_euclidean(0, &vec![0.0, 1.0], &gallery).is_err());
    }

    #[test]
    fn ranking_ties_keep_gallery_order() {
        let gallery = vec![vec![1.0], vec![-1.0], vec![1.0]];
        let run = rank_by_euclidean(0, &vec![0.0], &gallery).unwrap();
        assert_eq!(run.ranking, vec![0, 1, 2]);
    }

    fn run_with(relevant: Vec<bool>) -> RetrievalRun {
        RetrievalRun {
            query: 0,
            ranking: (0..relevant.len()).collect(),
            distances: (0..relevant.len()).map(|i| i as f64).collect(),
            relevant,
        }
    }

    #[test]
    fn precision_examples() {
        let run = run_with(vec![true, false, true, true, false, false]);
        assert!((precision_at_q(&run, 5).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(precision_at_q(&run, 1).unwrap(), 1.0);
        let none = run_with(vec![false; 4]);
        for q in 1..=4 {
            assert_eq!(precision_at_q(&none, q).unwrap(), 0.0);
        }
        assert!(precision_at_q(&run, 0).is_err());
        assert!(precision_at_q(&run, 7).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[1, 2, 3], &[4, 5, 6]).unwrap(), 0.0);
        let p = [1, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        let t = [1; 10];
        assert!((top1_accuracy(&p, &t).unwrap() - 0.7).abs() < 1e-15);
        assert!(top1_accuracy::<i32>(&[], &[]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap(), 0.75);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    proptest! {
        #[test]
        fn auc_is_rank_invariant(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..30),
            seed in any::<u64>(),
        ) {
            let truths: Vec<bool> = scores.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
            let pos = truths.iter().filter(|&&t| t).count();
            prop_assume!(pos > 0 && pos < truths.len());
            let a = roc_auc(&scores, &truths).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.5).exp() + 3.0).collect();
            prop_assert!((a - roc_auc(&mapped, &truths).unwrap()).abs() < 1e-12);
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[0] != w[1]) {
                let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
                prop_assert!((a + roc_auc(&neg, &truths).unwrap() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn precision_counts_are_integral(flags in proptest::collection::vec(any::<bool>(), 1..20)) {
            let run = run_with(flags.clone());
            for q in 1..=flags.len() {
                let p = precision_at_q(&run, q).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!(((p * q as f64) - (p * q as f64).round()).abs() < 1e-9);
            }
        }

        #[test]
        fn ranking_ignores_shared_translation(
            rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 2..8),
            shift in -10.0f64..10.0,
        ) {
            let q = vec![0.5, -0.5, 0.0];
            let a = rank_by_euclidean(0, &q, &rows).unwrap();
            let moved: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0], r[1] + shift, r[2]]).collect();
            let qm = vec![q[0], q[1] + shift, q[2]];
            let b = rank_by_euclidean(0, &qm, &moved).unwrap();
            for (x, y) in a.distances.iter().zip(&b.distances) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn gallery_permutation_preserves_distances(
            rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 2), 2..8),
        ) {
            let q = vec![0.1, 0.2];
            let a = rank_by_euclidean(0, &q, &rows).unwrap();
            let rev: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
            let b = rank_by_euclidean(0, &q, &rev).unwrap();
            prop_assert_eq!(a.distances, b.distances);
        }
    }
}
