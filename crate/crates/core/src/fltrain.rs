//! Fraud-detection workload: imbalanced synthetic data, ULB-style CSV
//! ingestion, non-IID partitioning, logistic-regression gradients and
//! precision/recall metrics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;

/// Feature count of generated data (and of the ULB layout).
pub const SYNTH_FEATURES: usize = 30;
pub const DEFAULT_FRAUD_RATE: f64 = 0.0017;
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_ROUNDS: u64 = 30;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Each archetype shifts its own block of this many features.
const ARCHETYPE_BLOCK: usize = 10;
const ARCHETYPE_SHIFT: f64 = 2.0;
const MAX_ARCHETYPES: usize = SYNTH_FEATURES / ARCHETYPE_BLOCK;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("fraud rate {0} outside (0, 0.5)")]
    InvalidRate(f64),
    #[error("archetype count {0} outside 1..={MAX_ARCHETYPES}")]
    InvalidArchetypes(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("row {row}, column {column}: {message}")]
    Csv {
        row: u64,
        column: String,
        message: String,
    },
    #[error("last CSV column must be `Class`, found `{0}`")]
    MissingClass(String),
    #[error("need at least 2 banks, got {0}")]
    NotEnoughBanks(usize),
    #[error("skew {0} outside [0, 1]")]
    InvalidSkew(f64),
    #[error("model expects {expected} features, batch has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("inconsistent dataset: {0}")]
    Malformed(&'static str),
}

/// Row-major feature matrix with binary labels. `archetypes[i]` names the
/// fraud pattern of a fraud row and is 0 for legitimate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_features: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
    archetypes: Vec<u8>,
}

impl Dataset {
    pub fn new(n_features: usize, features: Vec<f64>, labels: Vec<u8>, archetypes: Vec<u8>) -> Result<Self, TrainError> {
        if n_features == 0 || features.len() != labels.len() * n_features || archetypes.len() != labels.len() {
            return Err(TrainError::Malformed("shape"));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(TrainError::Malformed("labels must be 0 or 1"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Malformed("non-finite feature"));
        }
        Ok(Self {
            n_features,
            features,
            labels,
            archetypes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn archetype(&self, i: usize) -> u8 {
        self.archetypes[i]
    }

    pub fn fraud_count(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn fraud_rate(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.fraud_count() as f64 / self.len() as f64
        }
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.n_features);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            n_features: self.n_features,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            archetypes: idx.iter().map(|&i| self.archetypes[i]).collect(),
        }
    }

    pub fn concat(parts: &[Dataset]) -> Result<Dataset, TrainError> {
        let first = parts.first().ok_or(TrainError::EmptyDataset)?;
        let mut out = Dataset {
            n_features: first.n_features,
            features: Vec::new(),
            labels: Vec::new(),
            archetypes: Vec::new(),
        };
        for p in parts {
            if p.n_features != out.n_features {
                return Err(TrainError::DimensionMismatch {
                    expected: out.n_features,
                    got: p.n_features,
                });
            }
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
            out.archetypes.extend_from_slice(&p.archetypes);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ModelParams {
    pub fn zeros(n_features: usize) -> Self {
        Self {
            weights: vec![0.0; n_features],
            bias: 0.0,
        }
    }

    /// Length of the flattened parameter vector, `weights ‖ bias`.
    pub fn dim(&self) -> usize {
        self.weights.len() + 1
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    fn logit(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    /// `θ ← θ − lr·g` for a flattened gradient.
    pub fn step(&mut self, grad: &[f64], lr: f64) -> Result<(), TrainError> {
        if grad.len() != self.dim() {
            return Err(TrainError::DimensionMismatch {
                expected: self.dim(),
                got: grad.len(),
            });
        }
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= lr * g;
        }
        self.bias -= lr * grad[grad.len() - 1];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighting of the fraud class in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosWeight {
    /// `n_legit / n_fraud` of the reference data, so both classes carry
    /// equal total weight.
    Balanced,
    Fixed(f64),
}

impl PosWeight {
    pub fn resolve(self, reference: &Dataset) -> f64 {
        match self {
            PosWeight::Fixed(w) => w,
            PosWeight::Balanced => {
                let pos = reference.fraud_count();
                if pos == 0 {
                    1.0
                } else {
                    (reference.len() - pos) as f64 / pos as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rounds: u64,
    pub pos_weight: PosWeight,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            rounds: DEFAULT_ROUNDS,
            pos_weight: PosWeight::Balanced,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Two fraud archetypes (or up to three) as mean-shifted Gaussian clusters,
/// each on its own block of features; legitimate rows are standard normal.
/// Exactly `round(n·fraud_rate)` rows are fraud, spread evenly over the
/// archetypes.
pub fn generate_synthetic(n: usize, fraud_rate: f64, archetypes: usize, seed: u64) -> Result<Dataset, TrainError> {
    if !(fraud_rate > 0.0 && fraud_rate < 0.5) {
        return Err(TrainError::InvalidRate(fraud_rate));
    }
    if archetypes == 0 || archetypes > MAX_ARCHETYPES {
        return Err(TrainError::InvalidArchetypes(archetypes));
    }
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = substream(seed, "synthetic", 0);
    let n_fraud = (n as f64 * fraud_rate).round() as usize;
    let mut kinds: Vec<Option<u8>> = (0..n)
        .map(|i| (i < n_fraud).then(|| (i % archetypes) as u8))
        .collect();
    kinds.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * SYNTH_FEATURES);
    let mut labels = Vec::with_capacity(n);
    let mut arche = Vec::with_capacity(n);
    for kind in kinds {
        for j in 0..SYNTH_FEATURES {
            let z: f64 = rng.sample(StandardNormal);
            let shift = match kind {
                Some(k) if j / ARCHETYPE_BLOCK == k as usize => ARCHETYPE_SHIFT,
                _ => 0.0,
            };
            features.push(z + shift);
        }
        labels.push(kind.is_some() as u8);
        arche.push(kind.unwrap_or(0));
    }
    Dataset::new(SYNTH_FEATURES, features, labels, arche)
}

/// Reads a numeric CSV whose last column is the binary `Class` label and
/// z-scores every feature column. If an `Amount` column exists, fraud rows
/// above the median fraud amount are tagged archetype 1.
pub fn load_csv(path: &Path) -> Result<Dataset, TrainError> {
    let io = |e: &dyn std::fmt::Display| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io(&e))?;
    let headers = rdr.headers().map_err(|e| io(&e))?.clone();
    let last = headers.iter().next_back().unwrap_or("").to_string();
    if last != "Class" {
        return Err(TrainError::MissingClass(last));
    }
    let n_features = headers.len() - 1;
    if n_features == 0 {
        return Err(TrainError::Malformed("no feature columns"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i as u64 + 2;
        let rec = rec.map_err(|e| TrainError::Csv {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if rec.len() != headers.len() {
            return Err(TrainError::Csv {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| TrainError::Csv {
                row,
                column: headers[j].to_string(),
                message: format!("not a number: {cell:?}"),
            })?;
            if j == n_features {
                if v != 0.0 && v != 1.0 {
                    return Err(TrainError::Csv {
                        row,
                        column: "Class".into(),
                        message: format!("label must be 0 or 1, found {cell}"),
                    });
                }
                labels.push(v as u8);
            } else {
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    standardize(&mut features, n_features);
    let mut archetypes = vec![0u8; labels.len()];
    if let Some(amount) = headers.iter().position(|h| h == "Amount").filter(|&j| j < n_features) {
        let mut fraud_amounts: Vec<f64> = (0..labels.len())
            .filter(|&i| labels[i] == 1)
            .map(|i| features[i * n_features + amount])
            .collect();
        if !fraud_amounts.is_empty() {
            fraud_amounts.sort_by(f64::total_cmp);
            let median = fraud_amounts[fraud_amounts.len() / 2];
            for i in 0..labels.len() {
                if labels[i] == 1 && features[i * n_features + amount] > median {
                    archetypes[i] = 1;
                }
            }
        }
    }
    Dataset::new(n_features, features, labels, archetypes)
}

fn standardize(features: &mut [f64], n_features: usize) {
    let rows = features.len() / n_features;
    for j in 0..n_features {
        let col = (0..rows).map(|i| features[i * n_features + j]);
        let mean = col.clone().sum::<f64>() / rows as f64;
        let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = var.sqrt();
        for i in 0..rows {
            let v = &mut features[i * n_features + j];
            *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
        }
    }
}

/// Stratified split: `round(test_fraction·count)` rows of each class go to
/// the test set.
pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(TrainError::Malformed("test fraction outside [0, 1)"));
    }
    let mut rng = substream(seed, "split", 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Largest-remainder apportionment of `count` items by `weights`.
fn apportion(count: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        weights.to_vec()
    } else {
        vec![1.0; weights.len()]
    };
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| count as f64 * w / total).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest = count - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &b in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if weights[b] > 0.0 {
            out[b] += 1;
            rest -= 1;
        }
    }
    out
}

/// Splits `ds` across `n_banks`. Legitimate rows are dealt evenly. Fraud rows
/// of archetype `k` are apportioned with bank weight
/// `(1 − skew) + skew·[b mod K == k]`, where `K` is the number of archetypes
/// present, so at `skew = 1` each bank sees only its preferred archetype.
pub fn partition_non_iid(ds: &Dataset, n_banks: usize, skew: f64, seed: u64) -> Result<Vec<Dataset>, TrainError> {
    if n_banks < 2 {
        return Err(TrainError::NotEnoughBanks(n_banks));
    }
    if !(0.0..=1.0).contains(&skew) {
        return Err(TrainError::InvalidSkew(skew));
    }
    let mut rng = substream(seed, "partition", 0);
    let mut banks: Vec<Vec<usize>> = vec![Vec::new(); n_banks];
    let mut legit: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == 0).collect();
    legit.shuffle(&mut rng);
    for (k, i) in legit.into_iter().enumerate() {
        banks[k % n_banks].push(i);
    }
    let n_kinds = (0..ds.len())
        .filter(|&i| ds.labels[i] == 1)
        .map(|i| ds.archetypes[i] as usize + 1)
        .max()
        .unwrap_or(0);
    for kind in 0..n_kinds {
        let mut rows: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.labels[i] == 1 && ds.archetypes[i] as usize == kind)
            .collect();
        rows.shuffle(&mut rng);
        let weights: Vec<f64> = (0..n_banks)
            .map(|b| (1.0 - skew) + if b % n_kinds == kind { skew } else { 0.0 })
            .collect();
        let mut it = rows.into_iter();
        for (b, c) in apportion(it.len(), &weights).into_iter().enumerate() {
            banks[b].extend(it.by_ref().take(c));
        }
    }
    Ok(banks
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            ds.subset(&idx)
        })
        .collect())
}

/// Train/test split plus per-bank training partitions.
#[derive(Debug, Clone)]
pub struct FederatedSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub banks: Vec<Dataset>,
}

pub fn prepare_federated(
    ds: &Dataset,
    n_banks: usize,
    skew: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<FederatedSplit, TrainError> {
    let (train, test) = stratified_split(ds, test_fraction, seed)?;
    let banks = partition_non_iid(&train, n_banks, skew, seed)?;
    Ok(FederatedSplit { train, test, banks })
}

fn check_batch(params: &ModelParams, batch: &Dataset) -> Result<(), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if batch.n_features != params.weights.len() {
        return Err(TrainError::DimensionMismatch {
            expected: params.weights.len(),
            got: batch.n_features,
        });
    }
    Ok(())
}

/// Mean log-loss gradient, `(σ(w·x + b) − y)·(x, 1)` averaged over the batch.
pub fn logistic_gradient(params: &ModelParams, batch: &Dataset) -> Result<Vec<f64>, TrainError> {
    logistic_gradient_weighted(params, batch, 1.0)
}

/// Class-weighted gradient: fraud rows carry weight `pos_weight`, the sum is
/// normalised by the total weight. Equals [`logistic_gradient`] at 1.
pub fn logistic_gradient_weighted(params: &ModelParams, batch: &Dataset, pos_weight: f64) -> Result<Vec<f64>, TrainError> {
    check_batch(params, batch)?;
    let d = batch.n_features;
    let mut g = vec![0.0; d + 1];
    let mut total = 0.0;
    for i in 0..batch.len() {
        let x = batch.row(i);
        let y = batch.labels[i] as f64;
        let w = if batch.labels[i] == 1 { pos_weight } else { 1.0 };
        let r = w * (params.score(x) - y);
        for (gj, xj) in g.iter_mut().zip(x) {
            *gj += r * xj;
        }
        g[d] += r;
        total += w;
    }
    for gj in &mut g {
        *gj /= total;
    }
    Ok(g)
}

pub fn log_loss(params: &ModelParams, batch: &Dataset) -> Result<f64, TrainError> {
    log_loss_weighted(params, batch, 1.0)
}

/// Weighted mean binary cross-entropy; the objective whose gradient is
/// [`logistic_gradient_weighted`].
pub fn log_loss_weighted(params: &ModelParams, batch: &Dataset, pos_weight: f64) -> Result<f64, TrainError> {
    check_batch(params, batch)?;
    let (mut sum, mut total) = (0.0, 0.0);
    for i in 0..batch.len() {
        let z = params.logit(batch.row(i));
        // log(1 + e^z) computed stably
        let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
        let (w, l) = if batch.labels[i] == 1 {
            (pos_weight, softplus - z)
        } else {
            (1.0, softplus)
        };
        sum += w * l;
        total += w;
    }
    Ok(sum / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub auprc: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Precision/recall at `threshold` and the trapezoidal area under the
/// precision-recall curve swept over every distinct score.
pub fn evaluate(params: &ModelParams, test: &Dataset, threshold: f64) -> Result<Metrics, TrainError> {
    check_batch(params, test)?;
    let scores: Vec<f64> = (0..test.len()).map(|i| params.score(test.row(i))).collect();
    Ok(metrics_from_scores(&scores, test.labels(), threshold))
}

pub fn metrics_from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Metrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    Metrics {
        recall,
        precision,
        auprc: auprc(scores, labels),
        tp,
        fp,
        tn,
        fn_,
    }
}

/// Trapezoidal AUPRC. Tied scores form one threshold step; the curve starts
/// at recall 0 with the precision of the first step.
pub fn auprc(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    let (mut prev_r, mut prev_p) = (0.0, points[0].1);
    let mut area = 0.0;
    for (r, p) in points {
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    area
}

/// Full-batch gradient descent on one dataset.
pub fn train_local(data: &Dataset, cfg: &TrainConfig, pos_weight: f64) -> Result<ModelParams, TrainError> {
    let mut params = ModelParams::zeros(data.n_features);
    for _ in 0..cfg.rounds {
        let g = logistic_gradient_weighted(&params, data, pos_weight)?;
        params.step(&g, cfg.learning_rate)?;
    }
    Ok(params)
}

/// Each bank trained in isolation for the same budget, evaluated on the
/// shared test set.
pub fn local_baseline(split: &FederatedSplit, cfg: &TrainConfig) -> Result<Vec<Metrics>, TrainError> {
    let pw = cfg.pos_weight.resolve(&split.train);
    split
        .banks
        .iter()
        .map(|b| evaluate(&train_local(b, cfg, pw)?, &split.test, cfg.threshold))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::io::Write;

    fn toy(rows: &[(&[f64], u8)]) -> Dataset {
        let d = rows[0].0.len();
        let features = rows.iter().flat_map(|(x, _)| x.iter().copied()).collect();
        let labels = rows.iter().map(|(_, y)| *y).collect();
        Dataset::new(d, features, labels, vec![0; rows.len()]).unwrap()
    }

    fn random_instance(seed: u64) -> (ModelParams, Dataset) {
        let mut rng = substream(seed, "fd", 0);
        let d = 5;
        let n = 8;
        let features = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        let ds = Dataset::new(d, features, labels, vec![0; n]).unwrap();
        let params = ModelParams {
            weights: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            bias: rng.gen_range(-1.0..1.0),
        };
        (params, ds)
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let ds = generate_synthetic(10_000, 0.0017, 2, 7).unwrap();
        assert_eq!(ds.fraud_count(), 17);
        assert_eq!(ds.n_features(), SYNTH_FEATURES);
        assert_eq!(ds, generate_synthetic(10_000, 0.0017, 2, 7).unwrap());
        assert_ne!(ds, generate_synthetic(10_000, 0.0017, 2, 8).unwrap());
        assert_eq!(generate_synthetic(10, 0.6, 2, 0), Err(TrainError::InvalidRate(0.6)));
        assert_eq!(generate_synthetic(10, 0.1, 4, 0), Err(TrainError::InvalidArchetypes(4)));
    }

    #[test]
    fn synthetic_archetypes_shift_their_block() {
        let ds = generate_synthetic(20_000, 0.1, 2, 3).unwrap();
        for kind in 0..2u8 {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == 1 && ds.archetype(i) == kind).collect();
            assert_eq!(rows.len(), 1000);
            for block in 0..2 {
                let mean: f64 = rows
                    .iter()
                    .map(|&i| ds.row(i)[block * 10..block * 10 + 10].iter().sum::<f64>() / 10.0)
                    .sum::<f64>()
                    / rows.len() as f64;
                let expected = if block == kind as usize { ARCHETYPE_SHIFT } else { 0.0 };
                assert!((mean - expected).abs() < 0.1, "kind {kind} block {block}: {mean}");
            }
        }
    }

    #[test]
    fn csv_fixture_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.csv");
        std::fs::write(&ok, "Time,V1,Amount,Class\n0,1.5,10,0\n1,-0.5,200,1\n2,0.0,30,0\n").unwrap();
        let ds = load_csv(&ok).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_features(), 3);
        assert_eq!(ds.labels(), &[0, 1, 0]);
        for j in 0..3 {
            let mean: f64 = (0..3).map(|i| ds.row(i)[j]).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
        }

        let no_class = dir.path().join("nc.csv");
        std::fs::write(&no_class, "Time,V1,Amount\n0,1,2\n").unwrap();
        assert_eq!(load_csv(&no_class), Err(TrainError::MissingClass("Amount".into())));

        let bad = dir.path().join("bad.csv");
        let mut f = std::fs::File::create(&bad).unwrap();
        writeln!(f, "Time,V1,Class\n0,1,0\n1,abc,1").unwrap();
        match load_csv(&bad) {
            Err(TrainError::Csv { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "V1");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_csv(&dir.path().join("missing.csv")), Err(TrainError::Io { .. })));
    }

    #[test]
    fn csv_amount_defines_archetype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "V1,Amount,Class\n0,1,1\n0,2,1\n0,300,1\n0,400,1\n0,5,0\n").unwrap();
        let ds = load_csv(&p).unwrap();
        let arch: Vec<u8> = (0..5).map(|i| ds.archetype(i)).collect();
        assert_eq!(arch, vec![0, 0, 0, 1, 0]);
    }

    #[test]
    fn stratified_split_preserves_ratio() {
        let ds = generate_synthetic(10_000, 0.01, 2, 1).unwrap();
        let (train, test) = stratified_split(&ds, 0.2, 1).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test.fraud_count(), 20);
        assert_eq!(test.len(), 2000);
    }

    #[test]
    fn extreme_skew_gives_single_archetype_banks() {
        let ds = generate_synthetic(4000, 0.05, 2, 2).unwrap();
        let banks = partition_non_iid(&ds, 2, 1.0, 2).unwrap();
        for (b, bank) in banks.iter().enumerate() {
            let kinds: std::collections::BTreeSet<u8> =
                (0..bank.len()).filter(|&i| bank.labels()[i] == 1).map(|i| bank.archetype(i)).collect();
            assert_eq!(kinds, [b as u8].into());
        }
    }

    #[test]
    fn zero_skew_matches_global_mix() {
        let ds = generate_synthetic(20_000, 0.05, 2, 4).unwrap();
        let banks = partition_non_iid(&ds, 5, 0.0, 4).unwrap();
        for bank in &banks {
            let fraud: Vec<usize> = (0..bank.len()).filter(|&i| bank.labels()[i] == 1).collect();
            let share = fraud.iter().filter(|&&i| bank.archetype(i) == 0).count() as f64 / fraud.len() as f64;
            assert!((share - 0.5).abs() <= 0.1, "{share}");
        }
    }

    #[test]
    fn partitions_are_disjoint_and_covering() {
        for (n_banks, skew) in [(2, 0.0), (3, 0.5), (10, 1.0), (7, 0.3)] {
            let ds = generate_synthetic(3000, 0.05, 2, 9).unwrap();
            let banks = partition_non_iid(&ds, n_banks, skew, 9).unwrap();
            assert_eq!(banks.iter().map(Dataset::len).sum::<usize>(), ds.len());
            // rows are distinct Gaussian draws, so compare them as bit patterns
            let key = |d: &Dataset, i: usize| d.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            let mut all: Vec<_> = banks.iter().flat_map(|b| (0..b.len()).map(move |i| key(b, i))).collect();
            let mut orig: Vec<_> = (0..ds.len()).map(|i| key(&ds, i)).collect();
            all.sort();
            orig.sort();
            assert_eq!(all, orig);
        }
        assert_eq!(partition_non_iid(&generate_synthetic(10, 0.1, 1, 0).unwrap(), 1, 0.0, 0).unwrap_err(), TrainError::NotEnoughBanks(1));
    }

    #[test]
    fn gradient_at_zero_matches_example() {
        let x = [1.0, -2.0, 3.0];
        let ds = toy(&[(&x, 1)]);
        let g = logistic_gradient(&ModelParams::zeros(3), &ds).unwrap();
        assert_eq!(g, vec![-0.5, 1.0, -1.5, -0.5]);
        assert_eq!(
            logistic_gradient(&ModelParams::zeros(3), &Dataset::new(3, vec![], vec![], vec![]).unwrap()),
            Err(TrainError::EmptyDataset)
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..100 {
            let (params, ds) = random_instance(seed);
            for pw in [1.0, 7.0] {
                let g = logistic_gradient_weighted(&params, &ds, pw).unwrap();
                let h = 1e-6;
                for j in 0..params.dim() {
                    let shifted = |delta: f64| {
                        let mut p = params.clone();
                        if j < p.weights.len() {
                            p.weights[j] += delta;
                        } else {
                            p.bias += delta;
                        }
                        log_loss_weighted(&p, &ds, pw).unwrap()
                    };
                    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                    let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-3);
                    assert!(rel < 1e-5, "seed {seed} j {j}: fd {fd} analytic {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn separable_batch_converges() {
        let ds = toy(&[(&[2.0], 1), (&[1.5], 1), (&[-1.5], 0), (&[-2.0], 0)]);
        let cfg = TrainConfig {
            learning_rate: 1.0,
            rounds: 5000,
            ..TrainConfig::default()
        };
        let p = train_local(&ds, &cfg, 1.0).unwrap();
        let g = logistic_gradient(&p, &ds).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3);
    }

    #[test]
    fn metric_examples() {
        let labels = [1, 1, 0, 0];
        let perfect = metrics_from_scores(&[0.9, 0.8, 0.2, 0.1], &labels, 0.5);
        assert_eq!((perfect.recall, perfect.precision, perfect.auprc), (1.0, 1.0, 1.0));
        let constant = auprc(&[0.3; 10], &[1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!((constant - 0.1).abs() < 1e-12);
        // scores 0.9(+) 0.7(−) 0.6(+) 0.2(−): points (0.5,1) (0.5,0.5) (1,2/3) (1,0.5)
        // area = 0.5·1 + 0 + 0.5·(0.5+2/3)/2 + 0 = 0.5 + 0.291666…
        let hand = auprc(&[0.9, 0.7, 0.6, 0.2], &[1, 0, 1, 0]);
        assert!((hand - (0.5 + 7.0 / 24.0)).abs() < 1e-12, "{hand}");
        let m = metrics_from_scores(&[0.9, 0.7, 0.6, 0.2], &[1, 0, 1, 0], 0.65);
        assert_eq!((m.tp, m.fp, m.tn, m.fn_), (1, 1, 1, 1));
        assert_eq!(metrics_from_scores(&[0.1, 0.2], &[1, 0], 0.5).precision, 0.0);
    }

    #[test]
    fn weighted_training_finds_rare_class() {
        let ds = generate_synthetic(20_000, 0.01, 2, 11).unwrap();
        let split = prepare_federated(&ds, 4, 0.0, 0.2, 11).unwrap();
        let cfg = TrainConfig::default();
        let pw = cfg.pos_weight.resolve(&split.train);
        let p = train_local(&split.train, &cfg, pw).unwrap();
        let m = evaluate(&p, &split.test, 0.5).unwrap();
        assert!(m.recall > 0.8, "{m:?}");
        let unweighted = train_local(&split.train, &cfg, 1.0).unwrap();
        assert!(evaluate(&unweighted, &split.test, 0.5).unwrap().recall < m.recall);
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_recall_monotone(
            data in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..60),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let (scores, labels): (Vec<f64>, Vec<u8>) = data.into_iter().unzip();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = metrics_from_scores(&scores, &labels, lo);
            let b = metrics_from_scores(&scores, &labels, hi);
            for m in [a, b] {
                for v in [m.recall, m.precision, m.auprc] {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
                }
            }
            prop_assert!(b.recall <= a.recall);
        }
    }
}
