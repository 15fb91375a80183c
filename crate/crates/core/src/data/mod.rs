//! Paired visible / polarimetric datasets: synthesis, preprocessing, pair
//! sampling and the on-disk format.

mod dog;
mod format;
mod pairs;
mod synth;

pub use dog::{dog_filter, gaussian_blur, gaussian_kernel, normalize_max_abs, PreprocessConfig};
pub use format::{load_dataset, manifest_path, save_dataset, write_atomic};
pub use pairs::{sample_balanced_pairs, Pair, PairBatch, PairSampler};
pub use synth::{
    generate_synthetic_dataset, identity_latent, oracle_attribute_accuracy, render_polar, render_visible,
    sample_variation, split_identities, Blob, IdentityLatent, SampleVariation, SynthConfig, ATTRIBUTE_NAMES,
    NUM_ATTRIBUTES,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub identity: u32,
    /// Attribute bits, bit `t` for attribute `t`.
    pub attributes: u16,
    /// `(1, H, W)`
    pub visible: Tensor<f32>,
    /// `(3, H, W)` holding `S0`, `S1`, `S2`.
    pub polar: Tensor<f32>,
}

impl PairedSample {
    pub fn attribute(&self, t: usize) -> bool {
        self.attributes >> t & 1 == 1
    }

    pub fn attribute_vector(&self) -> Vec<f32> {
        (0..NUM_ATTRIBUTES).map(|t| self.attribute(t) as u8 as f32).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u16,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub identities: usize,
    /// Number of samples per identity label, indexed by label.
    pub identity_counts: Vec<usize>,
    pub attributes: Vec<String>,
    pub train_identities: Vec<u32>,
    pub test_identities: Vec<u32>,
    /// Generator parameters, absent for datasets not produced by the synthesizer.
    pub generator: Option<SynthConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    /// Checks the manifest against itself and against the samples.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let bad = |msg: String| Err(Error::Mismatch(msg));
        if m.samples != self.samples.len() {
            return bad(format!("manifest lists {} samples, found {}", m.samples, self.samples.len()));
        }
        if m.identity_counts.len() != m.identities {
            return bad(format!(
                "identity_counts has {} entries for {} identities",
                m.identity_counts.len(),
                m.identities
            ));
        }
        if m.identity_counts.iter().sum::<usize>() != m.samples {
            return bad("per-identity counts do not sum to the sample count".into());
        }
        if m.attributes.len() != NUM_ATTRIBUTES {
            return bad(format!("expected {NUM_ATTRIBUTES} attribute names, got {}", m.attributes.len()));
        }
        let mut seen = vec![0u8; m.identities];
        for &id in m.train_identities.iter().chain(&m.test_identities) {
            match seen.get_mut(id as usize) {
                Some(s) => *s += 1,
                None => return bad(format!("split lists unknown identity {id}")),
            }
        }
        if seen.iter().any(|&s| s != 1) {
            return bad("train and test identities must partition the identity set".into());
        }
        let mut counts = vec![0usize; m.identities];
        for (i, s) in self.samples.iter().enumerate() {
            if s.visible.shape() != [1, m.height, m.width] || s.polar.shape() != [3, m.height, m.width] {
                return bad(format!(
                    "sample {i}: visible {:?} / polar {:?} do not match {}x{}",
                    s.visible.shape(),
                    s.polar.shape(),
                    m.height,
                    m.width
                ));
            }
            match counts.get_mut(s.identity as usize) {
                Some(c) => *c += 1,
                None => return bad(format!("sample {i} has unknown identity {}", s.identity)),
            }
        }
        if counts != m.identity_counts {
            return bad("samples disagree with identity_counts".into());
        }
        Ok(())
    }

    pub fn identities(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.manifest.train_identities,
            Split::Test => &self.manifest.test_identities,
        }
    }

    /// Indices of the samples whose identity belongs to `split`, in storage order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let mut member = vec![false; self.manifest.identities];
        for &id in self.identities(split) {
            member[id as usize] = true;
        }
        (0..self.samples.len())
            .filter(|&i| member[self.samples[i].identity as usize])
            .collect()
    }

    /// Applies `config` to both modalities of every sample.
    pub fn preprocess(&self, config: &PreprocessConfig) -> Result<Dataset> {
        config.validate()?;
        let samples = par::try_map(self.samples.len(), |i| {
            let s = &self.samples[i];
            Ok::<_, Error>(PairedSample {
                identity: s.identity,
                attributes: s.attributes,
                visible: config.apply(&s.visible)?,
                polar: config.apply(&s.polar)?,
            })
        })?;
        Ok(Dataset {
            manifest: self.manifest.clone(),
            samples,
        })
    }

    /// Stacks the visible images of `indices` into `(N, 1, H, W)`.
    pub fn visible_batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let v: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].visible).collect();
        Ok(Tensor::stack(&v)?)
    }

    /// Stacks the polarimetric triples of `indices` into `(N, 3, H, W)`.
    pub fn polar_batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let v: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].polar).collect();
        Ok(Tensor::stack(&v)?)
    }

    /// Attribute labels of `indices` as `(N, T)`.
    pub fn attribute_batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let data = indices
            .iter()
            .flat_map(|&i| self.samples[i].attribute_vector())
            .collect();
        Ok(Tensor::new(&[indices.len(), NUM_ATTRIBUTES], data)?)
    }
}
