//! In-process VFL inference: `M` client bottom models produce embeddings, the
//! server's top model turns the concatenated embedding into class
//! probabilities. The server enforces a per-sample query limit and can run a
//! randomized-smoothing or dropout defense.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::combinatorics::CorruptionPattern;
use crate::error::{invalid, Error, Result};
use crate::rng::{SeedPath, SimRng};
use crate::tinynet::{argmax, softmax, DenseNetwork, Dropout, TrainOptions};

/// Features of one sample, partitioned by client.
pub type PartitionedSample = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<PartitionedSample>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    bottoms: Vec<DenseNetwork>,
    top: DenseNetwork,
}

impl SplitModel {
    pub fn new(bottoms: Vec<DenseNetwork>, top: DenseNetwork) -> Result<Self> {
        if bottoms.is_empty() {
            return Err(invalid("split model needs at least one client"));
        }
        let width: usize = bottoms.iter().map(DenseNetwork::output_dim).sum();
        if width != top.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: top.input_dim(),
                actual: width,
            });
        }
        Ok(Self { bottoms, top })
    }

    pub fn clients(&self) -> usize {
        self.bottoms.len()
    }

    pub fn classes(&self) -> usize {
        self.top.output_dim()
    }

    pub fn bottoms(&self) -> &[DenseNetwork] {
        &self.bottoms
    }

    pub fn top(&self) -> &DenseNetwork {
        &self.top
    }

    pub fn embedding_dims(&self) -> Vec<usize> {
        self.bottoms.iter().map(DenseNetwork::output_dim).collect()
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.bottoms.iter().map(DenseNetwork::input_dim).collect()
    }

    /// `[h_1, ..., h_M]`, one bottom-model forward pass per client.
    pub fn client_embeddings(&self, sample: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if sample.len() != self.bottoms.len() {
            return Err(Error::DimensionMismatch {
                expected: self.bottoms.len(),
                actual: sample.len(),
            });
        }
        self.bottoms
            .iter()
            .zip(sample)
            .map(|(f, x)| f.predict(x))
            .collect()
    }

    /// Top-model probabilities for a full embedding, no defense.
    pub fn predict_embedding(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.top.predict(embedding)?))
    }

    /// Clean class probabilities for a sample.
    pub fn predict(&self, sample: &[Vec<f64>]) -> Result<Vec<f64>> {
        let full: Vec<f64> = self.client_embeddings(sample)?.concat();
        self.predict_embedding(&full)
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        Ok(per_class_accuracy(self, data)?.0)
    }

    /// Joint SGD on all bottom and top parameters. Returns training accuracy.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &LabeledDataset,
        opts: &TrainOptions,
        rng: &mut R,
    ) -> Result<f64> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..opts.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(opts.batch_size.max(1)) {
                self.sgd_step(data, chunk, opts.learning_rate)?;
            }
        }
        self.accuracy(data)
    }

    fn sgd_step(&mut self, data: &LabeledDataset, batch: &[usize], lr: f64) -> Result<()> {
        let mut top_grads = self.top.zero_gradients();
        let mut bottom_grads: Vec<_> = self.bottoms.iter().map(|b| b.zero_gradients()).collect();
        let dims = self.embedding_dims();
        for &i in batch {
            let traces = self
                .bottoms
                .iter()
                .zip(&data.samples[i])
                .map(|(b, x)| b.trace(x))
                .collect::<Result<Vec<_>>>()?;
            let full: Vec<f64> = traces.iter().flat_map(|t| t.output().iter().copied()).collect();
            let top_trace = self.top.trace(&full)?;
            let mut g = softmax(top_trace.output());
            g[data.labels[i]] -= 1.0;
            let g_emb = self.top.backward(&top_trace, &g, &mut top_grads);
            let mut offset = 0;
            for (m, bottom) in self.bottoms.iter().enumerate() {
                let slice = &g_emb[offset..offset + dims[m]];
                bottom.backward(&traces[m], slice, &mut bottom_grads[m]);
                offset += dims[m];
            }
        }
        let step = lr / batch.len().max(1) as f64;
        self.top.apply_gradients(&top_grads, step);
        for (b, g) in self.bottoms.iter_mut().zip(&bottom_grads) {
            b.apply_gradients(g, step);
        }
        Ok(())
    }
}

fn per_class_accuracy(model: &SplitModel, data: &LabeledDataset) -> Result<(f64, Vec<f64>)> {
    let mut hits = vec![0usize; data.classes];
    let counts = data.class_counts();
    for (x, &y) in data.samples.iter().zip(&data.labels) {
        if argmax(&model.predict(x)?) == y {
            hits[y] += 1;
        }
    }
    let total = hits.iter().sum::<usize>() as f64 / data.len().max(1) as f64;
    let per = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    Ok((total, per))
}

/// Embeddings of one sample split into the corrupted and benign parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBundle {
    /// Concatenation of the corrupted clients' embeddings, in pattern order.
    pub adversarial: Vec<f64>,
    /// Concatenation of the remaining clients' embeddings, in client order.
    pub benign: Vec<f64>,
    pub lb: f64,
    pub ub: f64,
}

impl EmbeddingBundle {
    pub fn split(embeddings: &[Vec<f64>], pattern: &CorruptionPattern) -> Result<Self> {
        if let Some(&last) = pattern.clients().last() {
            if last > embeddings.len() {
                return Err(invalid(format!(
                    "pattern {pattern} references client {last} of {}",
                    embeddings.len()
                )));
            }
        }
        let mut adversarial = Vec::new();
        let mut benign = Vec::new();
        for (m, h) in embeddings.iter().enumerate() {
            if pattern.contains(m + 1) {
                adversarial.extend_from_slice(h);
            } else {
                benign.extend_from_slice(h);
            }
        }
        let (lb, ub) = embedding_bounds(&adversarial)?;
        Ok(Self {
            adversarial,
            benign,
            lb,
            ub,
        })
    }

    /// `ub - lb`.
    pub fn range(&self) -> f64 {
        self.ub - self.lb
    }
}

/// Element-wise minimum and maximum of the adversarial embedding.
pub fn embedding_bounds(adversarial: &[f64]) -> Result<(f64, f64)> {
    if adversarial.is_empty() {
        return Err(invalid("adversarial embedding is empty"));
    }
    Ok(adversarial
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        }))
}

/// Rebuilds the full embedding in client order from its two parts.
pub fn reassemble(
    dims: &[usize],
    pattern: &CorruptionPattern,
    adversarial: &[f64],
    benign: &[f64],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(adversarial.len() + benign.len());
    let (mut a, mut b) = (0usize, 0usize);
    for (m, &d) in dims.iter().enumerate() {
        let (src, pos) = if pattern.contains(m + 1) {
            (adversarial, &mut a)
        } else {
            (benign, &mut b)
        };
        let end = *pos + d;
        let part = src.get(*pos..end).ok_or(Error::DimensionMismatch {
            expected: end,
            actual: src.len(),
        })?;
        out.extend_from_slice(part);
        *pos = end;
    }
    if a != adversarial.len() || b != benign.len() {
        return Err(Error::DimensionMismatch {
            expected: a + b,
            actual: adversarial.len() + benign.len(),
        });
    }
    Ok(out)
}

/// Standard deviation of the smoothing noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseStd {
    /// Fraction of the clean adversarial part's range `ub - lb`.
    RangeFraction(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Defense {
    #[default]
    None,
    /// Majority vote over `votes` predictions on Gaussian-noised embeddings.
    Smoothing { noise_std: NoiseStd, votes: usize },
    /// Inference-time dropout on the top model's hidden layers.
    Dropout { rate: f64 },
}

impl Defense {
    pub const DEFAULT_SMOOTHING: Defense = Defense::Smoothing {
        noise_std: NoiseStd::RangeFraction(0.1),
        votes: 100,
    };
    pub const DEFAULT_DROPOUT: Defense = Defense::Dropout { rate: 0.3 };
}

fn top_two(tally: &[usize]) -> (usize, usize) {
    tally.iter().fold((0, 0), |(a, b), &c| {
        if c > a {
            (c, a)
        } else {
            (a, b.max(c))
        }
    })
}

/// Anything the attack can query for class probabilities.
pub trait PredictionOracle {
    /// Probabilities for the embedding with the corrupted part replaced by
    /// `adversarial`. Costs one query of `sample_id`'s budget.
    fn query(
        &mut self,
        sample_id: usize,
        adversarial: &[f64],
        bundle: &EmbeddingBundle,
        pattern: &CorruptionPattern,
    ) -> Result<Vec<f64>>;

    fn queries_used(&self, sample_id: usize) -> usize;

    fn query_limit(&self) -> usize;
}

/// The server side of VFL inference with query accounting.
#[derive(Debug, Clone)]
pub struct QueryServer<'m> {
    model: &'m SplitModel,
    dims: Vec<usize>,
    counts: HashMap<usize, usize>,
    query_limit: usize,
    defense: Defense,
    rng: SimRng,
}

impl<'m> QueryServer<'m> {
    /// `defense_seed` drives the smoothing noise and dropout masks.
    pub fn new(model: &'m SplitModel, query_limit: usize, defense: Defense, defense_seed: u64) -> Result<Self> {
        match defense {
            Defense::Smoothing { votes: 0, .. } => {
                return Err(Error::Config("smoothing needs at least one vote".into()))
            }
            Defense::Smoothing {
                noise_std: NoiseStd::RangeFraction(s) | NoiseStd::Absolute(s),
                ..
            } if !(s >= 0.0) => {
                return Err(Error::Config(format!("smoothing noise {s} must be >= 0")))
            }
            Defense::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")))
            }
            _ => {}
        }
        Ok(Self {
            model,
            dims: model.embedding_dims(),
            counts: HashMap::new(),
            query_limit,
            defense,
            rng: SeedPath::new(defense_seed).label("defense").rng(),
        })
    }

    pub fn model(&self) -> &SplitModel {
        self.model
    }

    pub fn defense(&self) -> Defense {
        self.defense
    }

    /// Reassembles `adversarial` with the bundle's benign part, classifies it
    /// under the configured defense and charges one query to `sample_id`.
    /// The bundle's clean bounds scale range-relative smoothing noise.
    pub fn server_predict(
        &mut self,
        sample_id: usize,
        adversarial: &[f64],
        bundle: &EmbeddingBundle,
        pattern: &CorruptionPattern,
    ) -> Result<Vec<f64>> {
        let used = self.counts.get(&sample_id).copied().unwrap_or(0);
        if used >= self.query_limit {
            return Err(Error::QueryBudgetExceeded {
                sample: sample_id,
                limit: self.query_limit,
            });
        }
        let full = reassemble(&self.dims, pattern, adversarial, &bundle.benign)?;
        let p = self.classify(&full, bundle.range())?;
        self.counts.insert(sample_id, used + 1);
        Ok(p)
    }

    fn classify(&mut self, full: &[f64], range: f64) -> Result<Vec<f64>> {
        match self.defense {
            Defense::None => self.model.predict_embedding(full),
            Defense::Smoothing { .. } => self.smoothed_predict(full, range),
            Defense::Dropout { rate } => {
                let logits = self.model.top.forward(full, Dropout::Rate(rate), &mut self.rng)?;
                Ok(softmax(&logits))
            }
        }
    }

    /// Majority vote over noisy copies of `embedding`, returned as a one-hot
    /// vector (ties to the smallest class). `range` is the `ub - lb` that
    /// range-relative noise is scaled by. Uses plain prediction when the
    /// server has no smoothing configured.
    pub fn smoothed_predict(&mut self, embedding: &[f64], range: f64) -> Result<Vec<f64>> {
        let Defense::Smoothing { noise_std, votes } = self.defense else {
            return self.model.predict_embedding(embedding);
        };
        let std = match noise_std {
            NoiseStd::Absolute(s) => s,
            NoiseStd::RangeFraction(f) => f * range,
        };
        let classes = self.model.classes();
        let mut tally = vec![0usize; classes];
        let mut noisy = embedding.to_vec();
        for cast in 0..votes {
            for (n, &v) in noisy.iter_mut().zip(embedding) {
                let z: f64 = self.rng.sample(StandardNormal);
                *n = v + std * z;
            }
            tally[argmax(&self.model.top.predict(&noisy)?)] += 1;
            // Stop once the remaining votes cannot change the winner.
            let remaining = votes - cast - 1;
            let (first, second) = top_two(&tally);
            if first > second + remaining {
                break;
            }
        }
        let best = *tally.iter().max().expect("at least two classes");
        let winner = tally.iter().position(|&c| c == best).expect("max is present");
        let mut out = vec![0.0; classes];
        out[winner] = 1.0;
        Ok(out)
    }

    pub fn reset_counts(&mut self) {
        self.counts.clear();
    }
}

impl PredictionOracle for QueryServer<'_> {
    fn query(
        &mut self,
        sample_id: usize,
        adversarial: &[f64],
        bundle: &EmbeddingBundle,
        pattern: &CorruptionPattern,
    ) -> Result<Vec<f64>> {
        self.server_predict(sample_id, adversarial, bundle, pattern)
    }

    fn queries_used(&self, sample_id: usize) -> usize {
        self.counts.get(&sample_id).copied().unwrap_or(0)
    }

    fn query_limit(&self) -> usize {
        self.query_limit
    }
}

/// Parameters of the synthetic classification task standing in for a real
/// VFL dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    /// Raw feature width per client; its length is `M`.
    pub feature_dims: Vec<usize>,
    /// Bottom-model output width per client.
    pub embedding_dims: Vec<usize>,
    pub classes: usize,
    /// Relative informativeness per client: client `m`'s features are its
    /// class center scaled by `w_m` plus noise with std `base_noise`.
    pub informativeness: Vec<f64>,
    pub base_noise: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub top_hidden: usize,
    pub train: TrainOptions,
    pub max_epochs: usize,
    pub target_accuracy: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self::uniform(6)
    }
}

impl SyntheticTaskSpec {
    pub fn uniform(clients: usize) -> Self {
        Self {
            feature_dims: vec![4; clients],
            embedding_dims: vec![8; clients],
            classes: 4,
            informativeness: vec![1.0; clients],
            base_noise: 1.5,
            train_samples: 800,
            test_samples: 800,
            top_hidden: 64,
            train: TrainOptions {
                epochs: 20,
                learning_rate: 0.05,
                batch_size: 16,
            },
            max_epochs: 200,
            target_accuracy: 0.9,
        }
    }

    pub fn with_informativeness(mut self, weights: Vec<f64>) -> Self {
        self.informativeness = weights;
        self
    }

    pub fn clients(&self) -> usize {
        self.feature_dims.len()
    }

    fn validate(&self) -> Result<()> {
        let m = self.clients();
        if m == 0 {
            return Err(Error::Config("synthetic task needs at least one client".into()));
        }
        if self.embedding_dims.len() != m || self.informativeness.len() != m {
            return Err(Error::Config(format!(
                "feature_dims, embedding_dims and informativeness must all have {m} entries"
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("synthetic task needs at least two classes".into()));
        }
        if self.informativeness.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("informativeness weights must be positive".into()));
        }
        if self.train_samples < self.classes || self.test_samples < self.classes {
            return Err(Error::Config("too few samples for the class count".into()));
        }
        Ok(())
    }
}

/// A trained split model with its train and held-out data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub seed: u64,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub model: SplitModel,
    pub train_accuracy: f64,
}

/// Class-conditional Gaussian blobs, partitioned across clients, plus a split
/// model trained on them to the target accuracy.
pub fn make_synthetic_task(spec: &SyntheticTaskSpec, seed: u64) -> Result<SyntheticTask> {
    spec.validate()?;
    let root = SeedPath::new(seed).label("synthetic-task");
    // Clients of equal width share one set of class centers up to a
    // client-specific signed coordinate permutation, so equally weighted
    // clients are interchangeable.
    let mut rng = root.label("centers").rng();
    let mut base: HashMap<usize, Vec<Vec<f64>>> = HashMap::new();
    let mut per_client: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.clients());
    for &d in &spec.feature_dims {
        let shared = base
            .entry(d)
            .or_insert_with(|| {
                (0..spec.classes)
                    .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect()
            })
            .clone();
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut rng);
        let signs: Vec<f64> = (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        per_client.push(
            shared
                .iter()
                .map(|c| (0..d).map(|j| signs[j] * c[perm[j]]).collect())
                .collect(),
        );
    }
    // centers[class][client]
    let centers: Vec<Vec<Vec<f64>>> = (0..spec.classes)
        .map(|y| per_client.iter().map(|c| c[y].clone()).collect())
        .collect();
    let draw = |n: usize, rng: &mut SimRng| -> LabeledDataset {
        let mut samples = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            // Round-robin labels keep every class present.
            let y = i % spec.classes;
            let x: PartitionedSample = centers[y]
                .iter()
                .zip(&spec.informativeness)
                .map(|(c, &w)| {
                    let s = spec.base_noise;
                    c.iter()
                        .map(|&mu| w * mu + s * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            samples.push(x);
            labels.push(y);
        }
        LabeledDataset {
            samples,
            labels,
            classes: spec.classes,
        }
    };
    let train = draw(spec.train_samples, &mut root.label("train").rng());
    let test = draw(spec.test_samples, &mut root.label("test").rng());

    let mut init = root.label("init").rng();
    let bottoms = spec
        .feature_dims
        .iter()
        .zip(&spec.embedding_dims)
        .map(|(&d, &e)| {
            DenseNetwork::random_with(
                &[d, e],
                crate::tinynet::Activation::Relu,
                crate::tinynet::Activation::Relu,
                &mut init,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let width: usize = spec.embedding_dims.iter().sum();
    let top = DenseNetwork::random(&[width, spec.top_hidden, spec.classes], &mut init)?;
    let mut model = SplitModel::new(bottoms, top)?;

    let mut shuffle = root.label("sgd").rng();
    let chunk = spec.train.epochs.max(1);
    let mut epochs = 0;
    let mut acc = 0.0;
    while epochs < spec.max_epochs {
        let step = chunk.min(spec.max_epochs - epochs);
        let opts = TrainOptions {
            epochs: step,
            ..spec.train
        };
        acc = model.train(&train, &opts, &mut shuffle)?;
        epochs += step;
        if acc >= spec.target_accuracy {
            break;
        }
    }
    if acc < spec.target_accuracy {
        let (achieved, per_class) = per_class_accuracy(&model, &train)?;
        return Err(Error::TrainingFailed {
            target: spec.target_accuracy,
            achieved,
            epochs,
            per_class,
        });
    }
    Ok(SyntheticTask {
        spec: spec.clone(),
        seed,
        train,
        test,
        model,
        train_accuracy: acc,
    })
}
