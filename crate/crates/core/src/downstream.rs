//! Phase-2 classifiers trained on raw or stacked features.
//!
//! The softmax kinds produce logits `z`, take `log_softmax(z)` and minimize
//! categorical cross-entropy plus `λ‖Δ‖²` over all parameters `Δ` with Adam.

use std::collections::BTreeMap;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{
    adam_step, backward, forward, AdamConfig, AdamState, DiffError, Graph, Inputs, Matrix, NodeId,
    ParamStore,
};
use crate::seed::rng_from_seed;
use crate::stacking::StackedDataset;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training data is empty")]
    EmptyData,
    #[error("knn needs neighbors <= n ({neighbors} > {n})")]
    TooManyNeighbors { neighbors: usize, n: usize },
    #[error("invalid classifier spec: {0}")]
    InvalidSpec(String),
    #[error("input has {got} features, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} outside [0, {m})")]
    LabelOutOfRange { label: usize, m: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("model serialization: {0}")]
    Serde(String),
}

pub type Result<T, E = ClassifierError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    SoftmaxLinear,
    SoftmaxMlp,
    Knn,
    GaussianNb,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::SoftmaxLinear => "softmax_linear",
            ClassifierKind::SoftmaxMlp => "softmax_mlp",
            ClassifierKind::Knn => "knn",
            ClassifierKind::GaussianNb => "gaussian_nb",
        }
    }
}

impl FromStr for ClassifierKind {
    type Err = ClassifierError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_linear" | "logistic" => Ok(ClassifierKind::SoftmaxLinear),
            "softmax_mlp" | "mlp" => Ok(ClassifierKind::SoftmaxMlp),
            "knn" => Ok(ClassifierKind::Knn),
            "gaussian_nb" | "nb" => Ok(ClassifierKind::GaussianNb),
            other => Err(ClassifierError::InvalidSpec(format!(
                "unknown classifier `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    /// Registry name; defaults to the kind name.
    #[serde(default)]
    pub name: Option<String>,
    pub kind: ClassifierKind,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_neighbors() -> usize {
    5
}
fn default_lambda() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    50
}
fn default_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    32
}

impl ClassifierSpec {
    pub fn new(kind: ClassifierKind) -> Self {
        Self {
            name: None,
            kind,
            hidden: default_hidden(),
            neighbors: default_neighbors(),
            lambda: default_lambda(),
            epochs: default_epochs(),
            lr: default_lr(),
            batch_size: default_batch(),
            seed: 0,
        }
    }

    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(self.kind.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ClassifierError::InvalidSpec(m.to_string()));
        if self.neighbors == 0 {
            return bad("neighbors must be >= 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if matches!(
            self.kind,
            ClassifierKind::SoftmaxLinear | ClassifierKind::SoftmaxMlp
        ) {
            if self.batch_size == 0 {
                return bad("batch_size must be >= 1");
            }
            if !(self.lr > 0.0 && self.lr.is_finite()) {
                return bad("lr must be finite and > 0");
            }
            if self.kind == ClassifierKind::SoftmaxMlp && self.hidden.contains(&0) {
                return bad("hidden widths must be positive");
            }
        }
        Ok(())
    }
}

/// The four-classifier registry used by experiments unless configured otherwise.
pub fn default_registry() -> Vec<ClassifierSpec> {
    [
        ClassifierKind::SoftmaxLinear,
        ClassifierKind::SoftmaxMlp,
        ClassifierKind::Knn,
        ClassifierKind::GaussianNb,
    ]
    .into_iter()
    .map(ClassifierSpec::new)
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClassifierState {
    Softmax {
        params: ParamStore,
    },
    Knn {
        vectors: Vec<Vec<f64>>,
        labels: Vec<usize>,
    },
    GaussianNb {
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
        priors: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedClassifier {
    pub spec: ClassifierSpec,
    pub m: usize,
    pub dim: usize,
    /// Classes with no training rows.
    pub absent_classes: Vec<usize>,
    pub state: ClassifierState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// Normalized log-probabilities; `None` for kNN.
    pub log_probs: Option<Vec<f64>>,
}

fn layer_widths(spec: &ClassifierSpec, dim: usize, m: usize) -> Vec<usize> {
    let mut widths = vec![dim];
    if spec.kind == ClassifierKind::SoftmaxMlp {
        widths.extend(&spec.hidden);
    }
    widths.push(m);
    widths
}

fn init_softmax(spec: &ClassifierSpec, dim: usize, m: usize) -> ParamStore {
    let mut rng = rng_from_seed(spec.seed);
    let mut params = ParamStore::new();
    for (l, w) in layer_widths(spec, dim, m).windows(2).enumerate() {
        let bound = 1.0 / (w[0] as f64).sqrt();
        let data = (0..w[0] * w[1])
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        params.insert(
            format!("clf.{l}.weight"),
            Matrix::from_vec(w[0], w[1], data),
        );
        params.insert(format!("clf.{l}.bias"), Matrix::zeros(1, w[1]));
    }
    params
}

/// Appends the logit network for `x` (rows × dim) to `g`.
pub fn build_logits(g: &mut Graph, spec: &ClassifierSpec, x: NodeId) -> NodeId {
    let layers = if spec.kind == ClassifierKind::SoftmaxMlp {
        spec.hidden.len() + 1
    } else {
        1
    };
    let mut h = x;
    for l in 0..layers {
        let w = g.param(&format!("clf.{l}.weight"));
        let b = g.param(&format!("clf.{l}.bias"));
        let z = g.matmul(h, w);
        h = g.add(z, b);
        if l + 1 < layers {
            h = g.relu(h);
        }
    }
    h
}

/// Mean cross-entropy of `log_softmax(logits)` against one-hot `y`, plus
/// `lambda` times the squared norm of every parameter in `params`.
pub fn softmax_loss_graph(
    spec: &ClassifierSpec,
    params: &ParamStore,
    x: &[Vec<f64>],
    labels: &[usize],
    m: usize,
) -> (Graph, Inputs, NodeId) {
    let mut g = Graph::new();
    let xin = g.input("x");
    let yin = g.input("y");
    let logits = build_logits(&mut g, spec, xin);
    let logp = g.log_softmax_rows(logits);
    let picked = g.mul(logp, yin);
    let total = g.sum(picked);
    let mut loss = g.scale(total, -1.0 / x.len() as f64);
    if spec.lambda > 0.0 {
        let mut terms = Vec::new();
        for name in params.names() {
            let p = g.param(name);
            let sq = g.mul(p, p);
            terms.push(g.sum(sq));
        }
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = g.add(acc, *t);
        }
        let penalty = g.scale(acc, spec.lambda);
        loss = g.add(loss, penalty);
    }
    let mut onehot = Matrix::zeros(labels.len(), m);
    for (i, &y) in labels.iter().enumerate() {
        onehot.set(i, y, 1.0);
    }
    let mut inputs = Inputs::new();
    inputs.insert("x".into(), Matrix::from_rows(x));
    inputs.insert("y".into(), onehot);
    (g, inputs, loss)
}

/// Per-epoch mean training loss is returned alongside the model for softmax kinds.
pub fn train_classifier_with_history(
    data: &StackedDataset,
    spec: &ClassifierSpec,
) -> Result<(TrainedClassifier, Vec<f64>)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(ClassifierError::EmptyData);
    }
    let m = data.m();
    let dim = data.stacked_dim;
    if let Some(bad) = data.vectors.iter().find(|v| v.len() != dim) {
        return Err(ClassifierError::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    if let Some(&label) = data.labels.iter().find(|&&l| l >= m) {
        return Err(ClassifierError::LabelOutOfRange { label, m });
    }
    let mut counts = vec![0usize; m];
    for &l in &data.labels {
        counts[l] += 1;
    }
    let absent_classes: Vec<usize> = (0..m).filter(|&c| counts[c] == 0).collect();
    if !absent_classes.is_empty() {
        warn!(
            "{}: classes {:?} have no training rows",
            spec.name(),
            absent_classes
        );
    }

    let mut history = Vec::new();
    let state = match spec.kind {
        ClassifierKind::Knn => {
            if spec.neighbors > data.len() {
                return Err(ClassifierError::TooManyNeighbors {
                    neighbors: spec.neighbors,
                    n: data.len(),
                });
            }
            ClassifierState::Knn {
                vectors: data.vectors.clone(),
                labels: data.labels.clone(),
            }
        }
        ClassifierKind::GaussianNb => fit_gaussian_nb(data, &counts),
        ClassifierKind::SoftmaxLinear | ClassifierKind::SoftmaxMlp => {
            let mut params = init_softmax(spec, dim, m);
            let mut adam = AdamState::new(&params, AdamConfig::default());
            let mut rng = rng_from_seed(spec.seed ^ 0x5eed);
            let mut order: Vec<usize> = (0..data.len()).collect();
            for _ in 0..spec.epochs {
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for chunk in order.chunks(spec.batch_size) {
                    let x: Vec<Vec<f64>> = chunk.iter().map(|&i| data.vectors[i].clone()).collect();
                    let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
                    let (g, inputs, loss) = softmax_loss_graph(spec, &params, &x, &y, m);
                    let (value, grads) = backward(&g, &params, &inputs, loss)?;
                    adam_step(&mut params, &grads, &mut adam, spec.lr)?;
                    total += value * chunk.len() as f64;
                }
                history.push(total / data.len() as f64);
            }
            ClassifierState::Softmax { params }
        }
    };
    Ok((
        TrainedClassifier {
            spec: spec.clone(),
            m,
            dim,
            absent_classes,
            state,
        },
        history,
    ))
}

pub fn train_classifier(data: &StackedDataset, spec: &ClassifierSpec) -> Result<TrainedClassifier> {
    Ok(train_classifier_with_history(data, spec)?.0)
}

/// Variance floor added to every per-class feature variance.
pub const NB_VAR_FLOOR: f64 = 1e-9;

fn fit_gaussian_nb(data: &StackedDataset, counts: &[usize]) -> ClassifierState {
    let (m, dim) = (data.m(), data.stacked_dim);
    let mut means = vec![vec![0.0; dim]; m];
    for (v, &l) in data.vectors.iter().zip(&data.labels) {
        for (acc, x) in means[l].iter_mut().zip(v) {
            *acc += x;
        }
    }
    for (mean, &c) in means.iter_mut().zip(counts) {
        if c > 0 {
            mean.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    let mut variances = vec![vec![0.0; dim]; m];
    for (v, &l) in data.vectors.iter().zip(&data.labels) {
        for ((acc, x), mu) in variances[l].iter_mut().zip(v).zip(&means[l]) {
            *acc += (x - mu).powi(2);
        }
    }
    for (var, &c) in variances.iter_mut().zip(counts) {
        for x in var.iter_mut() {
            *x = if c > 0 { *x / c as f64 } else { 1.0 } + NB_VAR_FLOOR;
        }
    }
    let n = data.len() as f64;
    let priors = counts.iter().map(|&c| c as f64 / n).collect();
    ClassifierState::GaussianNb {
        means,
        variances,
        priors,
    }
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority vote among the `k` nearest rows; distance ties go to the lower
/// row index and vote ties to the lower class index.
fn knn_vote(vectors: &[Vec<f64>], labels: &[usize], m: usize, k: usize, x: &[f64]) -> usize {
    // sorted ascending by (distance, row); at most k entries
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, v) in vectors.iter().enumerate() {
        let dist = squared_distance(v, x);
        if best.len() == k && dist >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(d, _)| d <= dist);
        best.insert(pos, (dist, i));
        best.truncate(k);
    }
    let mut votes = vec![0usize; m];
    for &(_, i) in &best {
        votes[labels[i]] += 1;
    }
    let mut winner = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[winner] {
            winner = c;
        }
    }
    winner
}

impl TrainedClassifier {
    pub fn name(&self) -> &str {
        self.spec.name()
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        if x.len() != self.dim {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(match &self.state {
            ClassifierState::Knn { vectors, labels } => Prediction {
                label: knn_vote(vectors, labels, self.m, self.spec.neighbors, x),
                log_probs: None,
            },
            ClassifierState::GaussianNb {
                means,
                variances,
                priors,
            } => {
                let joint: Vec<f64> = (0..self.m)
                    .map(|c| {
                        if priors[c] == 0.0 {
                            return f64::NEG_INFINITY;
                        }
                        let ll: f64 = x
                            .iter()
                            .zip(&means[c])
                            .zip(&variances[c])
                            .map(|((xv, mu), var)| {
                                -0.5 * (2.0 * std::f64::consts::PI * var).ln()
                                    - (xv - mu).powi(2) / (2.0 * var)
                            })
                            .sum();
                        priors[c].ln() + ll
                    })
                    .collect();
                let log_probs = log_softmax(&joint);
                Prediction {
                    label: argmax_lowest(&log_probs),
                    log_probs: Some(log_probs),
                }
            }
            ClassifierState::Softmax { params } => {
                let log_probs = self.softmax_log_probs(params, &[x.to_vec()])?.remove(0);
                Prediction {
                    label: argmax_lowest(&log_probs),
                    log_probs: Some(log_probs),
                }
            }
        })
    }

    fn softmax_log_probs(&self, params: &ParamStore, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.input("x");
        let logits = build_logits(&mut g, &self.spec, x);
        let logp = g.log_softmax_rows(logits);
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), Matrix::from_rows(rows));
        Ok(forward(&g, params, &inputs)?.into_value(logp).to_rows())
    }

    /// Row-wise labels, in input order.
    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<usize>> {
        if let Some(bad) = rows.iter().find(|r| r.len() != self.dim) {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.dim,
                got: bad.len(),
            });
        }
        match &self.state {
            ClassifierState::Softmax { params } if !rows.is_empty() => Ok(self
                .softmax_log_probs(params, rows)?
                .iter()
                .map(|lp| argmax_lowest(lp))
                .collect()),
            _ => rows.iter().map(|r| Ok(self.predict(r)?.label)).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| ClassifierError::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self =
            serde_json::from_str(s).map_err(|e| ClassifierError::Serde(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    /// Checks that the stored state is consistent with `spec`, `m` and `dim`.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ClassifierError::InvalidSpec(msg));
        self.spec.validate()?;
        if self.m == 0 {
            return bad("m must be positive".into());
        }
        if let Some(&c) = self.absent_classes.iter().find(|&&c| c >= self.m) {
            return Err(ClassifierError::LabelOutOfRange {
                label: c,
                m: self.m,
            });
        }
        let rows_ok = |rows: &[Vec<f64>]| rows.iter().all(|r| r.len() == self.dim);
        match &self.state {
            ClassifierState::Knn { vectors, labels } => {
                if vectors.is_empty() {
                    return Err(ClassifierError::EmptyData);
                }
                if vectors.len() != labels.len() || !rows_ok(vectors) {
                    return bad("knn rows and labels disagree in shape".into());
                }
                if let Some(&l) = labels.iter().find(|&&l| l >= self.m) {
                    return Err(ClassifierError::LabelOutOfRange {
                        label: l,
                        m: self.m,
                    });
                }
                if self.spec.neighbors > vectors.len() {
                    return Err(ClassifierError::TooManyNeighbors {
                        neighbors: self.spec.neighbors,
                        n: vectors.len(),
                    });
                }
            }
            ClassifierState::GaussianNb {
                means,
                variances,
                priors,
            } => {
                if means.len() != self.m
                    || variances.len() != self.m
                    || priors.len() != self.m
                    || !rows_ok(means)
                    || !rows_ok(variances)
                {
                    return bad("gaussian_nb tables must be m x dim".into());
                }
                if variances.iter().flatten().any(|&v| !(v > 0.0))
                    || priors.iter().any(|&p| !(p >= 0.0))
                {
                    return bad(
                        "gaussian_nb variances must be positive and priors non-negative".into(),
                    );
                }
            }
            ClassifierState::Softmax { params } => {
                let widths = layer_widths(&self.spec, self.dim, self.m);
                if params.len() != 2 * (widths.len() - 1) {
                    return bad("softmax parameter count does not match layers".into());
                }
                for (l, w) in widths.windows(2).enumerate() {
                    let weight = params.get(&format!("clf.{l}.weight")).map(Matrix::shape);
                    let bias = params.get(&format!("clf.{l}.bias")).map(Matrix::shape);
                    if weight != Some((w[0], w[1])) || bias != Some((1, w[1])) {
                        return bad(format!("softmax layer {l} has the wrong shape"));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn predict_dataset(model: &TrainedClassifier, data: &StackedDataset) -> Result<Vec<usize>> {
    model.predict_rows(&data.vectors)
}

/// Trains every spec in order, keyed by registry name.
pub fn train_registry(
    data: &StackedDataset,
    specs: &[ClassifierSpec],
) -> Result<BTreeMap<String, TrainedClassifier>> {
    let mut out = BTreeMap::new();
    for spec in specs {
        if out.contains_key(spec.name()) {
            return Err(ClassifierError::InvalidSpec(format!(
                "duplicate registry name `{}`",
                spec.name()
            )));
        }
        out.insert(spec.name().to_string(), train_classifier(data, spec)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stacked(vectors: Vec<Vec<f64>>, labels: Vec<usize>, m: usize) -> StackedDataset {
        let dim = vectors[0].len();
        StackedDataset {
            vectors,
            labels,
            class_names: (0..m).map(|c| format!("c{c}")).collect(),
            stacked_dim: dim,
        }
    }

    fn toy() -> StackedDataset {
        // separable by the line x + y = 0
        stacked(
            vec![
                vec![-2.0, -1.0],
                vec![-1.0, -2.0],
                vec![1.0, 2.0],
                vec![2.0, 1.0],
            ],
            vec![0, 0, 1, 1],
            2,
        )
    }

    #[test]
    fn softmax_linear_fits_separable_toy() {
        let spec = ClassifierSpec {
            epochs: 100,
            batch_size: 4,
            ..ClassifierSpec::new(ClassifierKind::SoftmaxLinear)
        };
        let data = toy();
        let model = train_classifier(&data, &spec).unwrap();
        assert_eq!(predict_dataset(&model, &data).unwrap(), data.labels);
    }

    #[test]
    fn unregularized_loss_descends() {
        let spec = ClassifierSpec {
            lambda: 0.0,
            epochs: 3,
            batch_size: 4,
            ..ClassifierSpec::new(ClassifierKind::SoftmaxLinear)
        };
        let (_, hist) = train_classifier_with_history(&toy(), &spec).unwrap();
        assert!(hist[0] > hist[1] && hist[1] > hist[2], "{hist:?}");
    }

    #[test]
    fn knn_stores_rows_and_finds_nearest() {
        let data = stacked(vec![vec![0.0, 0.0], vec![10.0, 10.0]], vec![0, 1], 2);
        let spec = ClassifierSpec {
            neighbors: 1,
            ..ClassifierSpec::new(ClassifierKind::Knn)
        };
        let model = train_classifier(&data, &spec).unwrap();
        match &model.state {
            ClassifierState::Knn { vectors, .. } => assert_eq!(vectors.len(), 2),
            _ => unreachable!(),
        }
        let p = model.predict(&[0.1, 0.0]).unwrap();
        assert_eq!(p.label, 0);
        assert!(p.log_probs.is_none());
        let too_many = ClassifierSpec {
            neighbors: 3,
            ..spec
        };
        assert!(matches!(
            train_classifier(&data, &too_many),
            Err(ClassifierError::TooManyNeighbors { .. })
        ));
    }

    #[test]
    fn knn_vote_tie_goes_to_lowest_class() {
        let data = stacked(vec![vec![1.0], vec![-1.0]], vec![1, 0], 2);
        let spec = ClassifierSpec {
            neighbors: 2,
            ..ClassifierSpec::new(ClassifierKind::Knn)
        };
        let model = train_classifier(&data, &spec).unwrap();
        assert_eq!(model.predict(&[0.0]).unwrap().label, 0);
        // equal distance, k=1: lower row index (label 1) wins
        let one = train_classifier(
            &data,
            &ClassifierSpec {
                neighbors: 1,
                ..spec
            },
        )
        .unwrap();
        assert_eq!(one.predict(&[0.0]).unwrap().label, 1);
    }

    #[test]
    fn zero_logits_give_uniform_and_class_zero() {
        let spec = ClassifierSpec::new(ClassifierKind::SoftmaxLinear);
        let mut params = ParamStore::new();
        params.insert("clf.0.weight", Matrix::zeros(2, 3));
        params.insert("clf.0.bias", Matrix::zeros(1, 3));
        let model = TrainedClassifier {
            spec,
            m: 3,
            dim: 2,
            absent_classes: vec![],
            state: ClassifierState::Softmax { params },
        };
        let p = model.predict(&[4.0, -1.0]).unwrap();
        assert_eq!(p.label, 0);
        for lp in p.log_probs.unwrap() {
            assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_nb_likelihood_dominance() {
        let data = stacked(
            vec![vec![-1.0], vec![1.0], vec![9.0], vec![11.0]],
            vec![0, 0, 1, 1],
            2,
        );
        let model =
            train_classifier(&data, &ClassifierSpec::new(ClassifierKind::GaussianNb)).unwrap();
        let p = model.predict(&[9.0]).unwrap();
        assert_eq!(p.label, 1);
        let total: f64 = p.log_probs.unwrap().iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn absent_class_is_flagged_and_never_predicted() {
        let data = stacked(vec![vec![0.0], vec![1.0], vec![5.0]], vec![0, 0, 2], 3);
        let model =
            train_classifier(&data, &ClassifierSpec::new(ClassifierKind::GaussianNb)).unwrap();
        assert_eq!(model.absent_classes, vec![1]);
        for x in [-3.0, 0.5, 2.5, 100.0] {
            assert_ne!(model.predict(&[x]).unwrap().label, 1);
        }
    }

    #[test]
    fn empty_data_and_dimension_errors() {
        let empty = StackedDataset {
            vectors: vec![],
            labels: vec![],
            class_names: vec!["a".into(), "b".into()],
            stacked_dim: 2,
        };
        assert!(matches!(
            train_classifier(&empty, &ClassifierSpec::new(ClassifierKind::Knn)),
            Err(ClassifierError::EmptyData)
        ));
        let model =
            train_classifier(&toy(), &ClassifierSpec::new(ClassifierKind::GaussianNb)).unwrap();
        assert!(matches!(
            model.predict(&[1.0]),
            Err(ClassifierError::DimensionMismatch { .. })
        ));
        assert_eq!(model.predict_rows(&[]).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn predict_rows_matches_predict() {
        let data = toy();
        for kind in [
            ClassifierKind::SoftmaxLinear,
            ClassifierKind::SoftmaxMlp,
            ClassifierKind::Knn,
            ClassifierKind::GaussianNb,
        ] {
            let spec = ClassifierSpec {
                neighbors: 3,
                epochs: 5,
                ..ClassifierSpec::new(kind)
            };
            let model = train_classifier(&data, &spec).unwrap();
            let queries = vec![vec![0.3, -0.2], vec![-5.0, 1.0], vec![2.0, 2.0]];
            let batch = model.predict_rows(&queries).unwrap();
            let single: Vec<usize> = queries
                .iter()
                .map(|q| model.predict(q).unwrap().label)
                .collect();
            assert_eq!(batch, single);
            assert_eq!(model.predict_rows(&queries).unwrap(), batch);
            let back = TrainedClassifier::from_json(&model.to_json().unwrap()).unwrap();
            assert_eq!(back.predict_rows(&queries).unwrap(), batch);
        }
    }

    #[test]
    fn cross_entropy_equals_negative_log_prob_of_truth() {
        let spec = ClassifierSpec {
            lambda: 0.0,
            ..ClassifierSpec::new(ClassifierKind::SoftmaxLinear)
        };
        let params = init_softmax(&spec, 2, 3);
        let x = vec![vec![0.4, -1.3]];
        let (g, inputs, loss) = softmax_loss_graph(&spec, &params, &x, &[2], 3);
        let ce = forward(&g, &params, &inputs).unwrap().get(loss).item();
        let model = TrainedClassifier {
            spec,
            m: 3,
            dim: 2,
            absent_classes: vec![],
            state: ClassifierState::Softmax { params },
        };
        let lp = model.predict(&x[0]).unwrap().log_probs.unwrap();
        assert!((ce + lp[2]).abs() < 1e-12);
    }

    #[test]
    fn from_json_rejects_inconsistent_models() {
        let data = toy();
        for kind in [
            ClassifierKind::SoftmaxMlp,
            ClassifierKind::Knn,
            ClassifierKind::GaussianNb,
        ] {
            let mut spec = ClassifierSpec::new(kind);
            spec.neighbors = 1;
            spec.epochs = 1;
            let model = train_classifier(&data, &spec).unwrap();
            assert_eq!(
                TrainedClassifier::from_json(&model.to_json().unwrap()).unwrap(),
                model
            );
            let mut broken = model.clone();
            broken.dim += 1;
            assert!(TrainedClassifier::from_json(&broken.to_json().unwrap()).is_err());
        }
        let mut spec = ClassifierSpec::new(ClassifierKind::Knn);
        spec.neighbors = 1;
        let mut model = train_classifier(&data, &spec).unwrap();
        if let ClassifierState::Knn { labels, .. } = &mut model.state {
            labels[0] = 99;
        }
        assert!(TrainedClassifier::from_json(&model.to_json().unwrap()).is_err());
    }

    #[test]
    fn regularization_shrinks_weights() {
        let data = stacked(
            (0..40)
                .map(|i| vec![(i % 7) as f64 - 3.0, (i % 5) as f64 * 0.5, (i % 3) as f64])
                .collect(),
            (0..40).map(|i| (i % 7 > 3) as usize).collect(),
            2,
        );
        let norm = |lambda: f64| {
            let spec = ClassifierSpec {
                lambda,
                epochs: 60,
                ..ClassifierSpec::new(ClassifierKind::SoftmaxLinear)
            };
            match train_classifier(&data, &spec).unwrap().state {
                ClassifierState::Softmax { params } => params.sum_of_squares(),
                _ => unreachable!(),
            }
        };
        assert!(norm(0.05) <= norm(0.0));
    }
}
