//! InfoNCE pre-training of an encoder over augmented positives and sampled
//! negatives.
//!
//! For an anchor `a` with positive `p` and negatives `n_1..n_L`, all encoded
//! by the same encoder:
//!
//! ```text
//! loss = -log( exp(sim(a,p)/τ) / (exp(sim(a,p)/τ) + Σ_l exp(sim(a,n_l)/τ)) )
//! ```
//!
//! where `sim` is cosine similarity. Batch loss is the mean over anchors.

use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::{build_batch_from_rows, AugmentError, ContrastiveBatch, PretextTask};
use crate::data::{DataError, Dataset, Sample};
use crate::diff::{
    adam_step, backward, AdamConfig, AdamState, DiffError, Graph, Inputs, LrSchedule, Matrix,
    NodeId, COSINE_EPS,
};
use crate::encoders::{
    build_encoder, encode_dataset, init_encoder, EncoderConfig, EncoderError, EncoderParams,
};
use crate::seed::rng_from_seed;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("invalid pretrain config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = PretrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub task: PretextTask,
    /// Negatives per anchor (`L`).
    pub negatives: usize,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            task: PretextTask::default(),
            negatives: 8,
            tau: 0.5,
            batch_size: 128,
            epochs: 30,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives == 0 {
            return Err(PretrainError::InvalidConfig(
                "negatives must be >= 1".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(PretrainError::BadTemperature(self.tau));
        }
        if self.batch_size == 0 {
            return Err(PretrainError::InvalidConfig(
                "batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    pub epoch_lr: Vec<f64>,
}

/// `u·v / (‖u‖‖v‖ + 1e-12)`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(PretrainError::LengthMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(dot / (nu * nv + COSINE_EPS))
}

/// InfoNCE loss for one anchor, computed with a max-shifted log-sum-exp.
pub fn infonce_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(PretrainError::BadTemperature(tau));
    }
    let pos = cosine_sim(anchor, positive)? / tau;
    let mut logits = vec![pos];
    for n in negatives {
        logits.push(cosine_sim(anchor, n)? / tau);
    }
    Ok(infonce_from_logits(&logits))
}

/// `-log softmax(logits)[0]`.
pub fn infonce_from_logits(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[0]
}

/// Graph computing the mean InfoNCE loss of a batch.
///
/// Input `views` stacks, for batch size `B`: anchors, positives, then the
/// `l`-th negative of every anchor for `l = 0..L`, each block `B` rows.
pub fn build_infonce_graph(
    g: &mut Graph,
    encoder: &EncoderConfig,
    batch: usize,
    negatives: usize,
    tau: f64,
) -> NodeId {
    let views = g.input("views");
    let emb = build_encoder(g, encoder, views, batch * (negatives + 2));
    let anchors = g.slice_rows(emb, 0, batch);
    let positives = g.slice_rows(emb, batch, batch);
    let mut sims = vec![g.cosine_rows(anchors, positives)];
    for l in 0..negatives {
        let neg = g.slice_rows(emb, (2 + l) * batch, batch);
        sims.push(g.cosine_rows(anchors, neg));
    }
    let logits = g.concat_cols(sims);
    let logits = g.scale(logits, 1.0 / tau);
    let logp = g.log_softmax_rows(logits);
    let pos = g.slice_cols(logp, 0, 1);
    let mean = g.mean(pos);
    g.neg(mean)
}

/// Stacks a batch into the `views` layout of [`build_infonce_graph`].
pub fn batch_views(batch: &ContrastiveBatch) -> Matrix {
    let mut rows: Vec<&[f64]> = Vec::with_capacity(batch.len() * (batch.num_negatives() + 2));
    rows.extend(batch.anchors.iter().map(Vec::as_slice));
    rows.extend(batch.positives.iter().map(Vec::as_slice));
    for l in 0..batch.num_negatives() {
        rows.extend(batch.negatives.iter().map(|n| n[l].as_slice()));
    }
    Matrix::from_rows(&rows)
}

/// Graph, bound inputs and loss node for one batch.
pub fn contrastive_loss_graph(
    encoder: &EncoderConfig,
    batch: &ContrastiveBatch,
    tau: f64,
) -> (Graph, Inputs, NodeId) {
    let mut g = Graph::new();
    let loss = build_infonce_graph(&mut g, encoder, batch.len(), batch.num_negatives(), tau);
    let mut inputs = Inputs::new();
    inputs.insert("views".into(), batch_views(batch));
    (g, inputs, loss)
}

/// Trains a freshly initialized encoder (seeded by `encoder.seed`) on the
/// feature rows of `data`. Shuffling and augmentation use `config.seed`.
pub fn pretrain(
    data: &Dataset,
    encoder: &EncoderConfig,
    config: &PretrainConfig,
) -> Result<(EncoderParams, TrainHistory)> {
    config.validate()?;
    if encoder.d_in != data.d() {
        return Err(EncoderError::DimensionMismatch {
            expected: encoder.d_in,
            got: data.d(),
        }
        .into());
    }
    config.task.validate(data.d())?;
    let n = data.n();
    if n <= config.negatives {
        return Err(AugmentError::NotEnoughSamples {
            n,
            negatives: config.negatives,
        }
        .into());
    }
    // only feature rows enter the loss path
    let rows: Vec<&[f64]> = data
        .samples()
        .iter()
        .map(|s| s.features.as_slice())
        .collect();

    let mut params = init_encoder(encoder)?;
    let mut adam = AdamState::new(&params.weights, config.adam);
    let mut rng = rng_from_seed(config.seed);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let lr = config.lr.lr(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch =
                build_batch_from_rows(&rows, chunk, config.task, config.negatives, &mut rng)?;
            let (g, inputs, loss) = contrastive_loss_graph(encoder, &batch, config.tau);
            let (value, grads) = backward(&g, &params.weights, &inputs, loss)?;
            adam_step(&mut params.weights, &grads, &mut adam, lr)?;
            total += value * chunk.len() as f64;
        }
        let mean = total / n as f64;
        debug!("epoch {epoch}: loss {mean:.6} lr {lr:e}");
        history.epoch_loss.push(mean);
        history.epoch_lr.push(lr);
    }
    Ok((params, history))
}

/// Embeddings as a dataset with features `e0..e{d'-1}` and the source labels.
pub fn embedding_dataset(params: &EncoderParams, data: &Dataset) -> Result<Dataset> {
    let emb = encode_dataset(params, data)?;
    let samples = emb
        .into_iter()
        .zip(data.samples())
        .map(|(features, s)| Sample {
            features,
            label: s.label,
        })
        .collect();
    let names = (0..params.config.d_out).map(|j| format!("e{j}")).collect();
    Ok(Dataset::new(samples, names, data.class_names().to_vec())?)
}

/// Writes the embedding CSV (`e0..e{d'-1},label`).
pub fn embed_and_export(
    params: &EncoderParams,
    data: &Dataset,
    path: impl AsRef<Path>,
) -> Result<Dataset> {
    let ds = embedding_dataset(params, data)?;
    ds.write_csv(path, "label")?;
    Ok(ds)
}
