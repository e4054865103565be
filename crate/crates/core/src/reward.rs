//! Reward models trained from selection labels.
//!
//! The scorer is linear over hashed character n-gram features of
//! `query + SEP + answer`, plus answer/query length, a task one-hot and a
//! bias. Each loss is first written against a score vector (returning the
//! loss and its gradient with respect to the scores) and then chained to
//! the weights through the features, which keeps the gradients easy to
//! check against finite differences.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::feedback::RewardSample;
use crate::scorer::TaskKind;

const SEP: char = '\u{1f}';
const EXTRA_FEATURES: usize = 6;

/// Sparse vector with strictly increasing indices.
pub type SparseVec = Vec<(u32, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizerConfig {
    pub buckets: usize,
    pub max_n: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            buckets: 1 << 16,
            max_n: 3,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buckets == 0 || self.buckets > u32::MAX as usize / 2 {
            return Err(Error::Config(format!("bucket count {} out of range", self.buckets)));
        }
        if self.max_n == 0 {
            return Err(Error::Config("max_n must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.buckets + EXTRA_FEATURES
    }

    pub fn featurize(&self, task: TaskKind, query: &str, answer: &str) -> SparseVec {
        let text: Vec<char> = query.chars().chain([SEP]).chain(answer.chars()).collect();
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        let mut total = 0usize;
        let mut buf = [0u8; 4];
        for n in 1..=self.max_n {
            for w in text.windows(n) {
                let mut h = FnvHasher::default();
                h.write_u8(n as u8);
                for c in w {
                    h.write(c.encode_utf8(&mut buf).as_bytes());
                }
                *counts.entry((h.finish() % self.buckets as u64) as u32).or_default() += 1.0;
                total += 1;
            }
        }
        let scale = 1.0 / (total.max(1) as f64).sqrt();
        let b = self.buckets as u32;
        let mut out: SparseVec = counts.into_iter().map(|(i, c)| (i, c * scale)).collect();
        out.push((b, answer.chars().count() as f64 / 10.0));
        out.push((b + 1, query.chars().count() as f64 / 10.0));
        out.push((b + 2 + task.index() as u32, 1.0));
        out.push((b + 5, 1.0));
        out
    }
}

fn dot(w: &[f64], f: &SparseVec) -> f64 {
    f.iter().map(|&(i, v)| w[i as usize] * v).sum()
}

fn sparse_dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// Projection used by the contrastive method: `normalize(w ⊙ f)`.
/// Returns the unit embedding and the norm of `w ⊙ f`.
fn embed(w: &[f64], f: &SparseVec) -> (SparseVec, f64) {
    let u: SparseVec = f.iter().map(|&(i, v)| (i, w[i as usize] * v)).collect();
    let norm = u.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return (u.into_iter().map(|(i, _)| (i, 0.0)).collect(), 0.0);
    }
    (u.into_iter().map(|(i, v)| (i, v / norm)).collect(), norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScoreHead {
    /// `score = w · f`.
    Linear,
    /// `score = normalize(w ⊙ f) · direction`, where direction is the
    /// difference of the positive and negative class centroids.
    Prototype { direction: SparseVec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub featurizer: FeaturizerConfig,
    pub weights: Vec<f64>,
    pub head: ScoreHead,
    pub method: Method,
}

impl RewardModel {
    pub fn new(featurizer: FeaturizerConfig, method: Method) -> Result<Self> {
        featurizer.validate()?;
        // The contrastive projection is degenerate at zero, so it starts
        // from the identity.
        let init = if method == Method::ContraWise { 1.0 } else { 0.0 };
        Ok(RewardModel {
            featurizer,
            weights: vec![init; featurizer.dim()],
            head: ScoreHead::Linear,
            method,
        })
    }

    pub fn score(&self, task: TaskKind, query: &str, answer: &str) -> f64 {
        self.score_features(&self.featurizer.featurize(task, query, answer))
    }

    pub fn score_sample(&self, s: &RewardSample) -> f64 {
        self.score(s.task, &s.query, &s.answer)
    }

    fn score_features(&self, f: &SparseVec) -> f64 {
        match &self.head {
            ScoreHead::Linear => dot(&self.weights, f),
            ScoreHead::Prototype { direction } => sparse_dot(&embed(&self.weights, f).0, direction),
        }
    }

    /// Sample-Wise read-out: the probability that the answer is selected.
    pub fn probability(&self, task: TaskKind, query: &str, answer: &str) -> f64 {
        sigmoid(self.score(task, query, answer))
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let m: RewardModel = serde_json::from_reader(input)?;
        m.featurizer.validate()?;
        if m.weights.len() != m.featurizer.dim() {
            return Err(Error::Integrity(format!(
                "model has {} weights but the featurizer needs {}",
                m.weights.len(),
                m.featurizer.dim()
            )));
        }
        Ok(m)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(x)`, stable for large |x|.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    QueryWise,
    SampleWise,
    ClassWise,
    BatchWise,
    ContraWise,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::QueryWise,
        Method::SampleWise,
        Method::ClassWise,
        Method::BatchWise,
        Method::ContraWise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::QueryWise => "query-wise",
            Method::SampleWise => "sample-wise",
            Method::ClassWise => "class-wise",
            Method::BatchWise => "batch-wise",
            Method::ContraWise => "contra-wise",
        }
    }

    /// Query-Wise learns from rank labels; the rest from binary labels.
    pub fn uses_rank_labels(self) -> bool {
        self == Method::QueryWise
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm || m.name().replace('-', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown reward method {s:?}")))
    }
}

// Losses on score vectors. Each returns (loss, dL/ds), or None when the
// batch holds nothing the loss can learn from.

/// Query-Wise: per query, `-(1/n) Σ_i (1/bt(i)) Σ_{j beaten by i}
/// (1/ld(i,j)) ln σ(s_i - s_j)`, averaged over queries that have a pair.
/// `groups[k]` lists the sample indices of one query.
pub fn query_wise_scores(labels: &[f64], scores: &[f64], groups: &[Vec<usize>]) -> Option<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; scores.len()];
    let mut total = 0.0;
    let mut used = 0usize;
    for g in groups {
        let n = g.len() as f64;
        let mut q_loss = 0.0;
        let mut any = false;
        for &i in g {
            let beaten: Vec<usize> = g.iter().copied().filter(|&j| labels[i] > labels[j]).collect();
            if beaten.is_empty() {
                continue;
            }
            any = true;
            let bt = beaten.len() as f64;
            for j in beaten {
                let w = 1.0 / (n * bt * (labels[i] - labels[j]));
                let d = scores[i] - scores[j];
                q_loss += w * neg_log_sigmoid(d);
                // d/dd of -ln σ(d) is σ(d) - 1
                let gd = w * (sigmoid(d) - 1.0);
                grad[i] += gd;
                grad[j] -= gd;
            }
        }
        if any {
            total += q_loss;
            used += 1;
        } else {
            for &i in g {
                grad[i] = 0.0;
            }
        }
    }
    if used == 0 {
        return None;
    }
    let m = used as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    Some((total / m, grad))
}

/// Sample-Wise: mean binary cross-entropy of σ(s) against the labels.
pub fn sample_wise_scores(labels: &[f64], scores: &[f64]) -> Option<(f64, Vec<f64>)> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&y, &s) in labels.iter().zip(scores) {
        loss += y * neg_log_sigmoid(s) + (1.0 - y) * neg_log_sigmoid(-s);
        grad.push((sigmoid(s) - y) / n);
    }
    Some((loss / n, grad))
}

fn split_classes(labels: &[f64]) -> (Vec<usize>, Vec<usize>) {
    (0..labels.len()).partition(|&i| labels[i] > 0.5)
}

/// Class-Wise: `-ln σ(mean positive score - mean negative score)`.
pub fn class_wise_scores(labels: &[f64], scores: &[f64]) -> Option<(f64, Vec<f64>)> {
    let (pos, neg) = split_classes(labels);
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mean = |ix: &[usize]| ix.iter().map(|&i| scores[i]).sum::<f64>() / ix.len() as f64;
    let d = mean(&pos) - mean(&neg);
    let gd = sigmoid(d) - 1.0;
    let mut grad = vec![0.0; scores.len()];
    for &i in &pos {
        grad[i] = gd / pos.len() as f64;
    }
    for &j in &neg {
        grad[j] = -gd / neg.len() as f64;
    }
    Some((neg_log_sigmoid(d), grad))
}

/// Batch-Wise: mean of `-ln σ(s_pos - s_neg)` over every positive and
/// negative pair, whatever their queries.
pub fn batch_wise_scores(labels: &[f64], scores: &[f64]) -> Option<(f64, Vec<f64>)> {
    let (pos, neg) = split_classes(labels);
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let pairs = (pos.len() * neg.len()) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for &i in &pos {
        for &j in &neg {
            let d = scores[i] - scores[j];
            loss += neg_log_sigmoid(d);
            let gd = (sigmoid(d) - 1.0) / pairs;
            grad[i] += gd;
            grad[j] -= gd;
        }
    }
    Some((loss / pairs, grad))
}

/// Supervised contrastive loss over unit embeddings. For each anchor with at
/// least one same-class partner: `-(1/|P|) Σ_p ln(exp(z·z_p/τ) / Σ_{a≠i}
/// exp(z·z_a/τ))`, averaged over such anchors. The gradient is with
/// respect to the embeddings, restricted to each embedding's support.
pub fn contra_wise_embeddings(labels: &[f64], z: &[SparseVec], temperature: f64) -> Option<(f64, Vec<Vec<f64>>)> {
    let n = z.len();
    let class: Vec<bool> = labels.iter().map(|&l| l > 0.5).collect();
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|j| j != i && class[j] == class[i]))
        .collect();
    if anchors.is_empty() {
        return None;
    }
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = sparse_dot(&z[i], &z[j]) / temperature;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    let m = anchors.len() as f64;
    // coef[i][j] = dL/dsim_ij
    let mut coef = vec![vec![0.0; n]; n];
    let mut loss = 0.0;
    for &i in &anchors {
        let max = (0..n).filter(|&a| a != i).map(|a| sim[i][a]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (sim[i][a] - max).exp()).sum();
        let lse = max + denom.ln();
        let partners: Vec<usize> = (0..n).filter(|&p| p != i && class[p] == class[i]).collect();
        let np = partners.len() as f64;
        for &p in &partners {
            loss += (lse - sim[i][p]) / np;
            coef[i][p] -= 1.0 / (np * m);
        }
        for a in (0..n).filter(|&a| a != i) {
            coef[i][a] += (sim[i][a] - lse).exp() / m;
        }
    }
    let mut grad: Vec<Vec<f64>> = z.iter().map(|zi| vec![0.0; zi.len()]).collect();
    for i in 0..n {
        for j in 0..n {
            let c = (coef[i][j] + coef[j][i]) / temperature;
            if i == j || c == 0.0 {
                continue;
            }
            // dz_i += c * z_j on supp(z_i)
            let (zi, zj) = (&z[i], &z[j]);
            let (mut a, mut b) = (0, 0);
            while a < zi.len() && b < zj.len() {
                match zi[a].0.cmp(&zj[b].0) {
                    std::cmp::Ordering::Less => a += 1,
                    std::cmp::Ordering::Greater => b += 1,
                    std::cmp::Ordering::Equal => {
                        grad[i][a] += c * zj[b].1;
                        a += 1;
                        b += 1;
                    }
                }
            }
        }
    }
    Some((loss / m, grad))
}

/// Featurized batch ready for loss evaluation.
pub struct Batch {
    pub features: Vec<SparseVec>,
    pub labels: Vec<f64>,
    pub groups: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(samples: &[RewardSample], featurizer: &FeaturizerConfig) -> Self {
        let mut by_query: BTreeMap<(TaskKind, &str), Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_query.entry((s.task, &s.query)).or_default().push(i);
        }
        Batch {
            features: samples
                .iter()
                .map(|s| featurizer.featurize(s.task, &s.query, &s.answer))
                .collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            groups: by_query.into_values().collect(),
        }
    }

    fn subset(&self, idx: &[usize]) -> Batch {
        let mut pos = vec![usize::MAX; self.labels.len()];
        for (k, &i) in idx.iter().enumerate() {
            pos[i] = k;
        }
        Batch {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            groups: self
                .groups
                .iter()
                .map(|g| g.iter().filter(|&&i| pos[i] != usize::MAX).map(|&i| pos[i]).collect::<Vec<_>>())
                .filter(|g| !g.is_empty())
                .collect(),
        }
    }
}

/// Loss of `method` on a featurized batch and its gradient with respect to
/// the weights. None when the batch has nothing to compare.
pub fn loss_and_grad(method: Method, w: &[f64], batch: &Batch, temperature: f64) -> Option<(f64, Vec<f64>)> {
    let mut gw = vec![0.0; w.len()];
    if method == Method::ContraWise {
        let emb: Vec<(SparseVec, f64)> = batch.features.iter().map(|f| embed(w, f)).collect();
        let z: Vec<SparseVec> = emb.iter().map(|(z, _)| z.clone()).collect();
        let (loss, gz) = contra_wise_embeddings(&batch.labels, &z, temperature)?;
        for (i, (zi, norm)) in emb.iter().enumerate() {
            if *norm == 0.0 {
                continue;
            }
            let proj: f64 = zi.iter().zip(&gz[i]).map(|((_, z), g)| z * g).sum();
            for (k, &(idx, zv)) in zi.iter().enumerate() {
                let du = (gz[i][k] - zv * proj) / norm;
                gw[idx as usize] += du * batch.features[i][k].1;
            }
        }
        return Some((loss, gw));
    }
    let scores: Vec<f64> = batch.features.iter().map(|f| dot(w, f)).collect();
    let (loss, gs) = match method {
        Method::QueryWise => query_wise_scores(&batch.labels, &scores, &batch.groups),
        Method::SampleWise => sample_wise_scores(&batch.labels, &scores),
        Method::ClassWise => class_wise_scores(&batch.labels, &scores),
        Method::BatchWise => batch_wise_scores(&batch.labels, &scores),
        Method::ContraWise => unreachable!(),
    }?;
    for (f, g) in batch.features.iter().zip(gs) {
        if g != 0.0 {
            for &(i, v) in f {
                gw[i as usize] += g * v;
            }
        }
    }
    Some((loss, gw))
}

fn loss_of(method: Method, samples: &[RewardSample], model: &RewardModel, temperature: f64) -> Result<f64> {
    let batch = Batch::new(samples, &model.featurizer);
    loss_and_grad(method, &model.weights, &batch, temperature)
        .map(|(l, _)| l)
        .ok_or_else(|| Error::Undefined(format!("{method} loss has nothing to compare in this batch")))
}

pub fn loss_query_wise(samples: &[RewardSample], model: &RewardModel) -> Result<f64> {
    loss_of(Method::QueryWise, samples, model, 1.0)
}

pub fn loss_sample_wise(samples: &[RewardSample], model: &RewardModel) -> Result<f64> {
    loss_of(Method::SampleWise, samples, model, 1.0)
}

pub fn loss_class_wise(samples: &[RewardSample], model: &RewardModel) -> Result<f64> {
    loss_of(Method::ClassWise, samples, model, 1.0)
}

pub fn loss_batch_wise(samples: &[RewardSample], model: &RewardModel) -> Result<f64> {
    loss_of(Method::BatchWise, samples, model, 1.0)
}

pub fn loss_contra_wise(samples: &[RewardSample], model: &RewardModel, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    loss_of(Method::ContraWise, samples, model, temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Samples per mini-batch; 0 means the whole set. Query-Wise batches
    /// never split a query.
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub optimizer: Optimizer,
    pub featurizer: FeaturizerConfig,
    /// Stop once the epoch loss has not improved by more than `tolerance`
    /// for this many epochs.
    pub patience: Option<usize>,
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 0.05,
            batch_size: 64,
            seed: 0,
            temperature: 0.1,
            optimizer: Optimizer::Adam,
            featurizer: FeaturizerConfig::default(),
            patience: None,
            tolerance: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.featurizer.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: RewardModel,
    /// Mean batch loss after each epoch, over that epoch's batches.
    pub curve: Vec<f64>,
    pub skipped_batches: usize,
}

fn is_binary(samples: &[RewardSample]) -> bool {
    samples.iter().all(|s| s.label == 0.0 || s.label == 1.0)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;

    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..w.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g[k] * g[k];
            w[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-8);
        }
    }
}

fn make_batches(full: &Batch, batch_size: usize, method: Method, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = full.labels.len();
    if batch_size == 0 || batch_size >= n {
        return vec![(0..n).collect()];
    }
    if method == Method::QueryWise {
        let mut groups = full.groups.clone();
        groups.shuffle(rng);
        let mut out = vec![Vec::new()];
        for g in groups {
            if out.last().unwrap().len() >= batch_size {
                out.push(Vec::new());
            }
            out.last_mut().unwrap().extend(g);
        }
        return out;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains a reward model with `method`. Deterministic for a fixed config.
pub fn train_reward_model(samples: &[RewardSample], method: Method, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("no reward samples to train on".into()));
    }
    if !method.uses_rank_labels() && !is_binary(samples) {
        return Err(Error::Config(format!("{method} needs binary labels but the data holds rank labels")));
    }
    if let Some(s) = samples.iter().find(|s| !(0.0..=100.0).contains(&s.label)) {
        return Err(Error::Validation(format!("label {} outside [0, 100]", s.label)));
    }
    let full = Batch::new(samples, &cfg.featurizer);
    if method == Method::QueryWise && query_wise_scores(&full.labels, &vec![0.0; full.labels.len()], &full.groups).is_none() {
        return Err(Error::Undefined("no query has two answers with different labels".into()));
    }
    let mut model = RewardModel::new(cfg.featurizer, method)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam {
        m: vec![0.0; model.weights.len()],
        v: vec![0.0; model.weights.len()],
        t: 0,
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let batches: Vec<Batch> = make_batches(&full, cfg.batch_size, method, &mut rng)
            .iter()
            .map(|ix| full.subset(ix))
            .collect();
        for b in &batches {
            match loss_and_grad(method, &model.weights, b, cfg.temperature) {
                Some((_, g)) => match cfg.optimizer {
                    Optimizer::Adam => adam.step(&mut model.weights, &g, cfg.learning_rate),
                    Optimizer::Sgd => {
                        for (w, g) in model.weights.iter_mut().zip(&g) {
                            *w -= cfg.learning_rate * g;
                        }
                    }
                },
                None => {
                    log::warn!("{method}: skipping a batch with nothing to compare");
                    skipped += 1;
                }
            }
        }
        let (mut sum, mut weight) = (0.0, 0.0);
        for b in &batches {
            if let Some((l, _)) = loss_and_grad(method, &model.weights, b, cfg.temperature) {
                sum += l * b.labels.len() as f64;
                weight += b.labels.len() as f64;
            }
        }
        let epoch_loss = if weight > 0.0 { sum / weight } else { f64::NAN };
        log::debug!("{method} epoch {epoch}: loss {epoch_loss:.6}");
        curve.push(epoch_loss);
        if let Some(p) = cfg.patience {
            if epoch_loss < best - cfg.tolerance {
                best = epoch_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= p {
                    break;
                }
            }
        }
    }
    if method == Method::ContraWise {
        model.head = prototype_head(&model.weights, &full);
    }
    Ok(TrainReport {
        model,
        curve,
        skipped_batches: skipped,
    })
}

fn prototype_head(w: &[f64], full: &Batch) -> ScoreHead {
    let mut dir: BTreeMap<u32, f64> = BTreeMap::new();
    let (pos, neg) = split_classes(&full.labels);
    for (ix, sign) in [(&pos, 1.0), (&neg, -1.0)] {
        if ix.is_empty() {
            continue;
        }
        let k = sign / ix.len() as f64;
        for &i in ix {
            for (idx, v) in embed(w, &full.features[i]).0 {
                *dir.entry(idx).or_default() += k * v;
            }
        }
    }
    ScoreHead::Prototype {
        direction: dir.into_iter().collect(),
    }
}

/// Fraction of ordered label pairs (label_i > label_j, across the whole set)
/// whose scores agree.
pub fn acc_rank_scores(labels: &[f64], scores: &[f64]) -> Result<f64> {
    let (mut pairs, mut good) = (0u64, 0u64);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] > labels[j] {
                pairs += 1;
                good += u64::from(scores[i] > scores[j]);
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Undefined("no pair of samples with different labels".into()));
    }
    Ok(good as f64 / pairs as f64)
}

/// Fraction of (positive, negative) pairs where the positive scores higher.
pub fn acc_binary_scores(labels: &[f64], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = split_classes(labels);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Undefined("accuracy needs both positive and negative samples".into()));
    }
    let good: u64 = pos
        .iter()
        .map(|&i| neg.iter().filter(|&&j| scores[i] > scores[j]).count() as u64)
        .sum();
    Ok(good as f64 / (pos.len() * neg.len()) as f64)
}

pub fn acc_rank(samples: &[RewardSample], model: &RewardModel) -> Result<f64> {
    let scores: Vec<f64> = samples.iter().map(|s| model.score_sample(s)).collect();
    acc_rank_scores(&samples.iter().map(|s| s.label).collect::<Vec<_>>(), &scores)
}

pub fn acc_binary(samples: &[RewardSample], model: &RewardModel) -> Result<f64> {
    if !is_binary(samples) {
        return Err(Error::Config("binary accuracy needs labels in {0, 1}".into()));
    }
    let scores: Vec<f64> = samples.iter().map(|s| model.score_sample(s)).collect();
    acc_binary_scores(&samples.iter().map(|s| s.label).collect::<Vec<_>>(), &scores)
}

// Synthetic data with a known separating direction: answers carry marker
// characters drawn from disjoint "good" and "bad" pools; everything else is
// filler shared by both classes.

const FILLER: &str = "的一是在不了有和人这中大为上个国我以要他时来用们生到作地于出就分对成会可主发年动同工也能下过子说产种面而方后多定行学法所民得经十三之进着等部度家电力里如水化高自二理起小物现实加量都两体制机当使点从业本去把性好应开它合还因由其些然前外天政四日那社义事平形相全表间样与关各重新线内数正心反你明看原又么利比或但质气第向道命此变条只没结解问意建月公无系军很情者最立代想已通并提直题党程展五果料象员革位入常文总次品式活设及管特件长求老头基资边流路级少图山统接知较将组见计别她手角期根论运农指几九区强放决西被干做必战先回则任取据处理";
const GOOD: &str = "赞妙佳优善美喜乐福顺";
const BAD: &str = "错烂差糟劣坏败丑恶废";

fn filler(rng: &mut ChaCha8Rng, n: usize) -> String {
    let pool: Vec<char> = FILLER.chars().collect();
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

fn with_markers(rng: &mut ChaCha8Rng, base: String, pool: &str, k: usize) -> String {
    let markers: Vec<char> = pool.chars().collect();
    let mut chars: Vec<char> = base.chars().collect();
    for _ in 0..k {
        let at = rng.gen_range(0..=chars.len());
        chars.insert(at, markers[rng.gen_range(0..markers.len())]);
    }
    chars.into_iter().collect()
}

/// `n` binary samples, half positive; positives contain one good marker and
/// negatives one bad marker.
pub fn synthetic_binary(n: usize, seed: u64) -> Vec<RewardSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let query = filler(&mut rng, 4);
            let len = rng.gen_range(3..=6);
            let base = filler(&mut rng, len);
            let answer = with_markers(&mut rng, base, if positive { GOOD } else { BAD }, 1);
            RewardSample {
                task: TaskKind::ALL[i % 2],
                query,
                answer,
                label: if positive { 1.0 } else { 0.0 },
            }
        })
        .collect()
}

/// `queries` groups of `per_query` answers; the answer with k good markers
/// gets rank label `100 k / (per_query - 1)`, so the number of markers is a
/// separating direction across the whole set.
pub fn synthetic_rank(queries: usize, per_query: usize, seed: u64) -> Vec<RewardSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = per_query.saturating_sub(1).max(1) as f64;
    let mut out = Vec::with_capacity(queries * per_query);
    for q in 0..queries {
        let query = format!("{}{q}", filler(&mut rng, 4));
        for k in 0..per_query {
            let len = rng.gen_range(3..=6);
            let base = filler(&mut rng, len);
            out.push(RewardSample {
                task: TaskKind::ALL[q % 2],
                query: query.clone(),
                answer: with_markers(&mut rng, base, GOOD, k),
                label: 100.0 * k as f64 / top,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn query_wise_examples() {
        let (l, _) = query_wise_scores(&[2.0, 1.0], &[0.0, 0.0], &[vec![0, 1]]).unwrap();
        // winner term ln 2, averaged over the two answers
        assert!(close(l, LN2 / 2.0, 1e-12));
        let (l, _) = query_wise_scores(&[2.0, 1.0], &[50.0, 0.0], &[vec![0, 1]]).unwrap();
        assert!(l < 1e-20);
        assert!(query_wise_scores(&[2.0, 1.0], &[0.0, 0.0], &[vec![0], vec![1]]).is_none());
        assert!(query_wise_scores(&[1.0, 1.0], &[0.0, 0.0], &[vec![0, 1]]).is_none());
    }

    #[test]
    fn sample_and_class_wise_examples() {
        assert!(close(sample_wise_scores(&[1.0], &[0.0]).unwrap().0, LN2, 1e-12));
        assert!(close(sample_wise_scores(&[0.0], &[0.0]).unwrap().0, LN2, 1e-12));
        assert!(sample_wise_scores(&[1.0, 0.0], &[800.0, -800.0]).unwrap().0 < 1e-300);
        assert!(close(class_wise_scores(&[1.0, 0.0], &[3.0, 3.0]).unwrap().0, LN2, 1e-12));
        let l = class_wise_scores(&[1.0, 1.0, 0.0], &[10.0, 30.0, 0.0]).unwrap().0;
        assert!(close(l, 2.0611536e-9, 1e-15));
        let l = class_wise_scores(&[1.0, 0.0], &[-10.0, 10.0]).unwrap().0;
        assert!(close(l, 20.000000002061153, 1e-9));
        assert!(class_wise_scores(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn batch_wise_examples() {
        let l = batch_wise_scores(&[1.0, 0.0], &[10.0, -10.0]).unwrap().0;
        assert!(close(l, 2.0611536e-9, 1e-15));
        assert!(close(batch_wise_scores(&[1.0, 0.0, 0.0], &[4.0, 4.0, 4.0]).unwrap().0, LN2, 1e-12));
        let labels = [1.0, 1.0, 0.0, 0.0, 0.0];
        let scores = [1.0, -0.5, 0.25, 2.0, -1.0];
        let mut want = 0.0;
        for i in 0..2 {
            for j in 2..5 {
                want += neg_log_sigmoid(scores[i] - scores[j]);
            }
        }
        assert!(close(batch_wise_scores(&labels, &scores).unwrap().0, want / 6.0, 1e-12));
    }

    #[test]
    fn contra_wise_examples() {
        let z = vec![vec![(0, 1.0)], vec![(0, 1.0)], vec![(1, 1.0)]];
        let (l, _) = contra_wise_embeddings(&[1.0, 1.0, 0.0], &z, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!(close(l, -(e / (e + 1.0)).ln(), 1e-12));
        // huge temperature: similarity-independent ln(batch - 1)
        let (l, _) = contra_wise_embeddings(&[1.0, 1.0, 0.0], &z, 1e12).unwrap();
        assert!(close(l, 2f64.ln(), 1e-9));
        let single = vec![vec![(0, 1.0)], vec![(1, 1.0)]];
        assert!(contra_wise_embeddings(&[1.0, 0.0], &single, 0.1).is_none());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(acc_rank_scores(&[3.0, 1.0, 2.0], &[0.9, 0.2, 0.5]).unwrap(), 1.0);
        assert_eq!(acc_rank_scores(&[3.0, 1.0, 2.0], &[0.2, 0.9, 0.5]).unwrap(), 0.0);
        assert!(acc_rank_scores(&[1.0, 1.0], &[0.0, 1.0]).is_err());
        assert_eq!(acc_binary_scores(&[1.0, 0.0], &[2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(acc_binary_scores(&[1.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(acc_binary_scores(&[1.0, 1.0, 0.0], &[2.0, 0.0, 1.0]).unwrap(), 0.5);
        assert!(acc_binary_scores(&[1.0, 1.0], &[2.0, 0.0]).is_err());
    }

    #[test]
    fn featurizer_is_deterministic_and_sorted() {
        let f = FeaturizerConfig::default();
        let a = f.featurize(TaskKind::Fk2c, "woban", "我办");
        assert_eq!(a, f.featurize(TaskKind::Fk2c, "woban", "我办"));
        assert!(a.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(a.iter().all(|&(i, _)| (i as usize) < f.dim()));
        assert_ne!(a, f.featurize(TaskKind::IntelAssoc, "woban", "我办"));
    }

    #[test]
    fn method_data_mismatch_is_a_config_error() {
        let rank = synthetic_rank(3, 3, 0);
        let err = train_reward_model(&rank, Method::BatchWise, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let flat: Vec<RewardSample> = rank.iter().map(|s| RewardSample { label: 7.0, ..s.clone() }).collect();
        assert!(matches!(
            train_reward_model(&flat, Method::QueryWise, &TrainConfig::default()),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn model_round_trips_through_json() {
        let data = synthetic_binary(40, 1);
        let cfg = TrainConfig {
            epochs: 3,
            featurizer: FeaturizerConfig { buckets: 128, max_n: 2 },
            ..TrainConfig::default()
        };
        let model = train_reward_model(&data, Method::ContraWise, &cfg).unwrap().model;
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = RewardModel::load(&buf[..]).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.score_sample(&data[0]), model.score_sample(&data[0]));
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("QueryWise".parse::<Method>().unwrap(), Method::QueryWise);
        assert!("listwise".parse::<Method>().is_err());
    }
}
