//! Supervised pretraining of the attribute predictor.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_dataset, Dataset, PreprocessConfig, SynthConfig, NUM_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::losses::attribute_loss;
use crate::nets::{AttributePredictor, PredictorConfig};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor};

/// Where the predictor's annotated training images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainSource {
    /// Visible images of the training split.
    TrainSplit,
    /// A separate annotated synthetic set rendered with the dataset's
    /// generator parameters, a derived seed and its own identities.
    Auxiliary {
        identities: usize,
        samples_per_identity: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub source: PretrainSource,
    /// Steps used when fine-tuning a copy of the predictor on other inputs.
    pub finetune_steps: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            adam: AdamConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            source: PretrainSource::Auxiliary {
                identities: 200,
                samples_per_identity: 2,
            },
            finetune_steps: 300,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("pretrain batch_size must be positive".into()));
        }
        if let PretrainSource::Auxiliary {
            identities,
            samples_per_identity,
        } = self.source
        {
            if identities < 2 || samples_per_identity == 0 {
                return Err(Error::InvalidArgument("auxiliary pretrain set is empty".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Per-step training loss.
    pub losses: Vec<f64>,
    /// Mean loss per pass over the training images.
    pub epoch_means: Vec<f64>,
    /// Held-out accuracy per attribute.
    pub held_out_accuracy: Vec<f64>,
    pub held_out_mean: f64,
}

/// Preprocessed images the predictor is trained on, with the indices to use.
pub fn pretrain_dataset(
    raw: &Dataset,
    train_indices: &[usize],
    config: &PretrainConfig,
    preprocess: &PreprocessConfig,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    match (&config.source, &raw.manifest.generator) {
        (
            PretrainSource::Auxiliary {
                identities,
                samples_per_identity,
            },
            Some(gen),
        ) => {
            let aux = SynthConfig {
                identities: *identities,
                samples_per_identity: *samples_per_identity,
                seed: derive_seed(seed ^ gen.seed, Stream::Pretrain, 0),
                ..gen.clone()
            };
            let ds = generate_synthetic_dataset(&aux)?.preprocess(preprocess)?;
            let all = (0..ds.samples.len()).collect();
            Ok((ds, all))
        }
        _ => Ok((raw.preprocess(preprocess)?, train_indices.to_vec())),
    }
}

/// Per-attribute accuracy of probabilities `(N, T)` against 0/1 labels,
/// predicting "present" when `p > 0.5`.
pub fn attribute_accuracy(probs: &Tensor<f32>, labels: &Tensor<f32>) -> Result<Vec<f64>> {
    if probs.shape() != labels.shape() || probs.shape().len() != 2 {
        return Err(Error::Mismatch(format!(
            "attribute accuracy: probabilities {:?} vs labels {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    let (n, t) = (probs.shape()[0], probs.shape()[1]);
    let mut correct = vec![0usize; t];
    for i in 0..n {
        for (k, c) in correct.iter_mut().enumerate() {
            let predicted = probs.data()[i * t + k] > 0.5;
            if predicted == (labels.data()[i * t + k] > 0.5) {
                *c += 1;
            }
        }
    }
    Ok(correct.iter().map(|&c| c as f64 / n.max(1) as f64).collect())
}

/// Probabilities for `indices`, computed in chunks.
pub fn predict_indices(
    a: &AttributePredictor<f32>,
    indices: &[usize],
    images: impl Fn(&[usize]) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(indices.len() * NUM_ATTRIBUTES);
    for chunk in indices.chunks(32) {
        data.extend_from_slice(a.predict(&images(chunk)?)?.data());
    }
    Ok(Tensor::new(&[indices.len(), a.config().attributes], data)?)
}

/// Minimizes the attribute cross-entropy of `a` on `indices` with Adam,
/// reshuffling every pass. Returns the per-step losses.
pub fn fit_predictor(
    a: &mut AttributePredictor<f32>,
    ds: &Dataset,
    indices: &[usize],
    images: impl Fn(&[usize]) -> Result<Tensor<f32>>,
    steps: u64,
    batch_size: usize,
    adam: AdamConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("attribute pretraining on an empty dataset".into()));
    }
    let mut opt = AdamState::new(adam, a.params().tensors());
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(steps as usize);
    let batch_size = batch_size.min(indices.len());
    for _ in 0..steps {
        if order.len() < batch_size {
            let mut fresh = indices.to_vec();
            fresh.shuffle(&mut stream_rng(seed, Stream::Pretrain, epoch + 1));
            epoch += 1;
            order = fresh;
        }
        let batch: Vec<usize> = order.drain(..batch_size).collect();
        let x = images(&batch)?;
        let y = ds.attribute_batch(&batch)?;
        let mut g = Graph::new();
        let p = a.params().bind(&mut g, true);
        let xv = g.constant(x);
        let logits = a.logits(&mut g, &p, xv)?;
        let loss = attribute_loss(&mut g, logits, &y)?;
        losses.push(g.value(loss).item() as f64);
        g.backward(loss)?;
        let grads: Vec<_> = p.iter().map(|&v| g.grad(v)).collect();
        adam_step(a.params_mut()?.tensors_mut(), &grads, &mut opt)?;
    }
    Ok(losses)
}

/// Trains `A` on visible images, reports held-out accuracy, and freezes it.
pub fn pretrain_attribute_predictor(
    train: (&Dataset, &[usize]),
    held_out: (&Dataset, &[usize]),
    predictor: &PredictorConfig,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(AttributePredictor<f32>, PretrainReport)> {
    config.validate()?;
    let (ds, idx) = train;
    if idx.is_empty() {
        return Err(Error::InvalidArgument("attribute pretraining on an empty dataset".into()));
    }
    let mut a = AttributePredictor::new(predictor.clone(), &mut stream_rng(seed, Stream::Init, 100))?;
    let losses = fit_predictor(
        &mut a,
        ds,
        idx,
        |b| ds.visible_batch(b),
        config.steps,
        config.batch_size,
        config.adam,
        seed,
    )?;
    let per_epoch = idx.len().div_ceil(config.batch_size.min(idx.len())).max(1);
    let epoch_means = losses
        .chunks(per_epoch)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let (hds, hidx) = held_out;
    let (held_out_accuracy, held_out_mean) = if hidx.is_empty() {
        (vec![], f64::NAN)
    } else {
        let probs = predict_indices(&a, hidx, |b| hds.visible_batch(b))?;
        let acc = attribute_accuracy(&probs, &hds.attribute_batch(hidx)?)?;
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        (acc, mean)
    };
    a.freeze();
    Ok((
        a,
        PretrainReport {
            losses,
            epoch_means,
            held_out_accuracy,
            held_out_mean,
        },
    ))
}
