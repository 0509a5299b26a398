//! TF-IDF n-gram featurization plus linear baselines: one-vs-rest linear SVM
//! and multinomial softmax regression.
//!
//! Features are unigrams and bigrams of the history and diagnosis text
//! (bigrams never span the field boundary) weighted by smoothed idf and
//! L2-normalized, concatenated with a dense structured block: min-max scaled
//! age, one-hot sex, one-hot exam code. Models carry their bias as a
//! trailing constant feature.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ExamRecord;
use crate::error::{Error, Result};
use crate::seed;

/// Joins bigram halves; cannot collide with word content because words come
/// from whitespace splitting.
const NGRAM_JOIN: char = '\u{1}';

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    pub version: u32,
    /// Sorted n-gram vocabulary; feature id = position.
    vocab: Vec<String>,
    df: Vec<usize>,
    idf: Vec<f64>,
    n_docs: usize,
    age_min: f64,
    age_max: f64,
    sexes: Vec<String>,
    exam_codes: Vec<String>,
}

fn field_ngrams(text: &str, out: &mut Vec<String>) {
    let words: Vec<&str> = text.split_whitespace().collect();
    for w in &words {
        out.push((*w).to_string());
    }
    for pair in words.windows(2) {
        out.push(format!("{}{NGRAM_JOIN}{}", pair[0], pair[1]));
    }
}

/// All unigrams+bigrams of one record's text fields (duplicates preserved;
/// counts are term frequency).
fn record_ngrams(record: &ExamRecord) -> Vec<String> {
    let mut out = Vec::new();
    field_ngrams(&record.history, &mut out);
    field_ngrams(&record.diagnosis, &mut out);
    out
}

/// Fit the vocabulary, document frequencies, and structured-feature ranges on
/// training records only.
pub fn fit_tfidf(records: &[ExamRecord]) -> Result<TfidfModel> {
    if records.is_empty() {
        return Err(Error::EmptyInput("fit_tfidf on empty corpus".into()));
    }
    let mut df: HashMap<String, usize> = HashMap::new();
    for record in records {
        let distinct: HashSet<String> = record_ngrams(record).into_iter().collect();
        for gram in distinct {
            *df.entry(gram).or_insert(0) += 1;
        }
    }
    let mut vocab: Vec<String> = df.keys().cloned().collect();
    vocab.sort();
    let df: Vec<usize> = vocab.iter().map(|g| df[g]).collect();
    let n_docs = records.len();
    let idf = df
        .iter()
        .map(|&d| ((1 + n_docs) as f64 / (1 + d) as f64).ln() + 1.0)
        .collect();
    let ages: Vec<f64> = records.iter().map(|r| r.age as f64).collect();
    let sexes: BTreeSet<String> = records.iter().map(|r| r.sex.clone()).collect();
    let exam_codes: BTreeSet<String> = records.iter().map(|r| r.exam_code.clone()).collect();
    Ok(TfidfModel {
        version: 1,
        vocab,
        df,
        idf,
        n_docs,
        age_min: ages.iter().cloned().fold(f64::INFINITY, f64::min),
        age_max: ages.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        sexes: sexes.into_iter().collect(),
        exam_codes: exam_codes.into_iter().collect(),
    })
}

impl TfidfModel {
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn df(&self, gram: &str) -> Option<usize> {
        self.vocab
            .binary_search_by(|g| g.as_str().cmp(gram))
            .ok()
            .map(|i| self.df[i])
    }

    pub fn idf_of(&self, gram: &str) -> Option<f64> {
        self.vocab
            .binary_search_by(|g| g.as_str().cmp(gram))
            .ok()
            .map(|i| self.idf[i])
    }

    /// Total feature dimension: text block + age + sex one-hot + exam one-hot.
    pub fn dim(&self) -> usize {
        self.vocab.len() + 1 + self.sexes.len() + self.exam_codes.len()
    }
}

/// Sparse feature vector, indices ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub dim: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dense(values: &[f64]) -> Self {
        FeatureVector {
            dim: values.len(),
            indices: (0..values.len() as u32).collect(),
            values: values.to_vec(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] = v;
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Transform one record: tf·idf over known n-grams, text block L2-normalized
/// when nonzero, unseen n-grams ignored, then the structured block.
pub fn transform(record: &ExamRecord, model: &TfidfModel) -> FeatureVector {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    for gram in record_ngrams(record) {
        if let Ok(i) = model.vocab.binary_search(&gram) {
            *counts.entry(i).or_insert(0.0) += 1.0;
        }
    }
    let mut text: Vec<(u32, f64)> = counts
        .into_iter()
        .map(|(i, tf)| (i as u32, tf * model.idf[i]))
        .collect();
    text.sort_unstable_by_key(|&(i, _)| i);
    let norm = text.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, v) in &mut text {
            *v /= norm;
        }
    }
    let mut indices: Vec<u32> = text.iter().map(|&(i, _)| i).collect();
    let mut values: Vec<f64> = text.iter().map(|&(_, v)| v).collect();

    let base = model.vocab.len() as u32;
    let age_span = model.age_max - model.age_min;
    let age_scaled = if age_span > 0.0 {
        ((record.age as f64 - model.age_min) / age_span).clamp(0.0, 1.0)
    } else {
        0.0
    };
    indices.push(base);
    values.push(age_scaled);
    if let Ok(i) = model.sexes.binary_search(&record.sex) {
        indices.push(base + 1 + i as u32);
        values.push(1.0);
    }
    if let Ok(i) = model.exam_codes.binary_search(&record.exam_code) {
        indices.push(base + 1 + model.sexes.len() as u32 + i as u32);
        values.push(1.0);
    }
    FeatureVector {
        dim: model.dim(),
        indices,
        values,
    }
}

pub fn transform_all(records: &[ExamRecord], model: &TfidfModel) -> Vec<FeatureVector> {
    records.iter().map(|r| transform(r, model)).collect()
}

/// Linear multiclass model; weight rows carry the bias as their last entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub version: u32,
    pub n_classes: usize,
    pub dim: usize,
    weights: Vec<Vec<f64>>,
}

impl LinearModel {
    fn zeros(n_classes: usize, dim: usize) -> Self {
        LinearModel {
            version: 1,
            n_classes,
            dim,
            weights: vec![vec![0.0; dim + 1]; n_classes],
        }
    }

    pub fn weights(&self, class: usize) -> &[f64] {
        &self.weights[class]
    }

    pub fn decision(&self, x: &FeatureVector) -> Vec<f64> {
        debug_assert_eq!(x.dim, self.dim);
        self.weights
            .iter()
            .map(|w| {
                let mut acc = w[self.dim]; // bias
                for (&i, &v) in x.indices.iter().zip(&x.values) {
                    acc += w[i as usize] * v;
                }
                acc
            })
            .collect()
    }

    /// Argmax decision value; ties go to the lower class id.
    pub fn predict(&self, x: &FeatureVector) -> usize {
        let scores = self.decision(x);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = i;
            }
        }
        best
    }

    pub fn predict_all(&self, xs: &[FeatureVector]) -> Vec<usize> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    pub fn predict_proba(&self, x: &FeatureVector) -> Vec<f64> {
        let scores = self.decision(x);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / sum).collect()
    }
}

/// Weight vector with lazy scalar decay, so L2 shrinkage costs O(1) and
/// additive updates cost O(nnz).
struct ScaledVec {
    scale: f64,
    v: Vec<f64>,
}

impl ScaledVec {
    fn zeros(dim: usize) -> Self {
        ScaledVec {
            scale: 1.0,
            v: vec![0.0; dim],
        }
    }

    fn decay(&mut self, factor: f64) {
        self.scale *= factor;
        if self.scale < 1e-9 {
            for x in &mut self.v {
                *x *= self.scale;
            }
            self.scale = 1.0;
        }
    }

    fn add_sparse(&mut self, x: &FeatureVector, bias_idx: usize, coef: f64) {
        let c = coef / self.scale;
        for (&i, &val) in x.indices.iter().zip(&x.values) {
            self.v[i as usize] += c * val;
        }
        self.v[bias_idx] += c;
    }

    fn dot(&self, x: &FeatureVector, bias_idx: usize) -> f64 {
        let mut acc = self.v[bias_idx];
        for (&i, &val) in x.indices.iter().zip(&x.values) {
            acc += self.v[i as usize] * val;
        }
        acc * self.scale
    }

    fn materialize(self) -> Vec<f64> {
        self.v.into_iter().map(|x| x * self.scale).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
    pub n_classes: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            epochs: 10,
            seed: 0,
            n_classes: 0,
        }
    }
}

fn check_training_inputs(
    features: &[FeatureVector],
    labels: &[usize],
    n_classes: usize,
) -> Result<()> {
    if features.is_empty() {
        return Err(Error::EmptyInput("training on empty feature set".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::shape(
            "train",
            &[features.len()],
            &[labels.len()],
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: n_classes,
        });
    }
    let distinct: HashSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidConfig(
            "training needs at least 2 classes present".into(),
        ));
    }
    Ok(())
}

/// One-vs-rest hinge loss + L2, trained by deterministic Pegasos-style SGD
/// (step size `1/(lambda t)`, `lambda = 1/(C n)`).
pub fn train_linear_svm(
    features: &[FeatureVector],
    labels: &[usize],
    config: &SvmConfig,
) -> Result<LinearModel> {
    check_training_inputs(features, labels, config.n_classes)?;
    let dim = features[0].dim;
    if config.epochs == 0 {
        return Ok(LinearModel::zeros(config.n_classes, dim));
    }
    let lambda = 1.0 / (config.c * features.len() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &["svm"]));
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut w: Vec<ScaledVec> = (0..config.n_classes).map(|_| ScaledVec::zeros(dim + 1)).collect();
    let mut t = 0u64;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = &features[i];
            for (class, w) in w.iter_mut().enumerate() {
                let y = if labels[i] == class { 1.0 } else { -1.0 };
                let margin = y * w.dot(x, dim);
                w.decay(1.0 - eta * lambda);
                if margin < 1.0 {
                    w.add_sparse(x, dim, eta * y);
                }
            }
        }
    }
    Ok(LinearModel {
        version: 1,
        n_classes: config.n_classes,
        dim,
        weights: w.into_iter().map(ScaledVec::materialize).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub n_classes: usize,
}

impl Default for SoftmaxConfig {
    fn default() -> Self {
        SoftmaxConfig {
            l2: 1e-4,
            learning_rate: 0.5,
            epochs: 10,
            seed: 0,
            n_classes: 0,
        }
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Multinomial logistic regression with L2, deterministic SGD.
pub fn train_softmax_reg(
    features: &[FeatureVector],
    labels: &[usize],
    config: &SoftmaxConfig,
) -> Result<LinearModel> {
    check_training_inputs(features, labels, config.n_classes)?;
    let dim = features[0].dim;
    if config.epochs == 0 {
        return Ok(LinearModel::zeros(config.n_classes, dim));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &["softmax"]));
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut w: Vec<ScaledVec> = (0..config.n_classes).map(|_| ScaledVec::zeros(dim + 1)).collect();
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let x = &features[i];
            let scores: Vec<f64> = w.iter().map(|w| w.dot(x, dim)).collect();
            let probs = softmax(&scores);
            for (class, w) in w.iter_mut().enumerate() {
                let err = probs[class] - if labels[i] == class { 1.0 } else { 0.0 };
                w.decay(1.0 - config.learning_rate * config.l2);
                if err != 0.0 {
                    w.add_sparse(x, dim, -config.learning_rate * err);
                }
            }
        }
    }
    Ok(LinearModel {
        version: 1,
        n_classes: config.n_classes,
        dim,
        weights: w.into_iter().map(ScaledVec::materialize).collect(),
    })
}

/// Regularized multinomial objective over dense weights; finite-difference
/// target for the gradient test.
pub fn softmax_objective(
    weights: &[Vec<f64>],
    features: &[FeatureVector],
    labels: &[usize],
    l2: f64,
) -> f64 {
    let dim = features[0].dim;
    let mut loss = 0.0;
    for (x, &label) in features.iter().zip(labels) {
        let scores: Vec<f64> = weights
            .iter()
            .map(|w| {
                let mut acc = w[dim];
                for (&i, &v) in x.indices.iter().zip(&x.values) {
                    acc += w[i as usize] * v;
                }
                acc
            })
            .collect();
        let probs = softmax(&scores);
        loss -= probs[label].max(f64::MIN_POSITIVE).ln();
    }
    loss /= features.len() as f64;
    let reg: f64 = weights
        .iter()
        .flat_map(|w| w.iter())
        .map(|&v| v * v)
        .sum();
    loss + 0.5 * l2 * reg
}

/// Analytic gradient of [`softmax_objective`].
pub fn softmax_gradient(
    weights: &[Vec<f64>],
    features: &[FeatureVector],
    labels: &[usize],
    l2: f64,
) -> Vec<Vec<f64>> {
    let dim = features[0].dim;
    let n = features.len() as f64;
    let mut grads: Vec<Vec<f64>> = weights.iter().map(|w| w.iter().map(|&v| l2 * v).collect()).collect();
    for (x, &label) in features.iter().zip(labels) {
        let scores: Vec<f64> = weights
            .iter()
            .map(|w| {
                let mut acc = w[dim];
                for (&i, &v) in x.indices.iter().zip(&x.values) {
                    acc += w[i as usize] * v;
                }
                acc
            })
            .collect();
        let probs = softmax(&scores);
        for (class, grad) in grads.iter_mut().enumerate() {
            let err = (probs[class] - if label == class { 1.0 } else { 0.0 }) / n;
            for (&i, &v) in x.indices.iter().zip(&x.values) {
                grad[i as usize] += err * v;
            }
            grad[dim] += err;
        }
    }
    grads
}
