//! Balanced genuine / impostor pair sampling.

use rand::Rng;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::PairLabel;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    /// Sample index supplying the visible image.
    pub visible: usize,
    /// Sample index supplying the polarimetric triple.
    pub polar: usize,
    pub label: PairLabel,
    pub visible_attributes: u16,
    pub polar_attributes: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.visible).collect()
    }

    pub fn polar_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.polar).collect()
    }

    pub fn labels(&self) -> Vec<PairLabel> {
        self.pairs.iter().map(|p| p.label).collect()
    }
}

/// Per-identity sample index for one split.
#[derive(Debug, Clone)]
pub struct PairSampler {
    by_identity: Vec<Vec<usize>>,
    attributes: Vec<u16>,
}

impl PairSampler {
    pub fn new(ds: &Dataset, split: Split) -> Result<Self> {
        let ids = ds.identities(split);
        let mut slot = vec![usize::MAX; ds.manifest.identities];
        for (k, &id) in ids.iter().enumerate() {
            slot[id as usize] = k;
        }
        let mut by_identity = vec![Vec::new(); ids.len()];
        for (i, s) in ds.samples.iter().enumerate() {
            let k = slot[s.identity as usize];
            if k != usize::MAX {
                by_identity[k].push(i);
            }
        }
        by_identity.retain(|v| !v.is_empty());
        if by_identity.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "pair sampling needs at least 2 identities with samples, split has {}",
                by_identity.len()
            )));
        }
        Ok(Self {
            by_identity,
            attributes: ds.samples.iter().map(|s| s.attributes).collect(),
        })
    }

    pub fn identity_count(&self) -> usize {
        self.by_identity.len()
    }

    fn pick(&self, k: usize, rng: &mut impl Rng) -> usize {
        let v = &self.by_identity[k];
        v[rng.random_range(0..v.len())]
    }

    fn pair(&self, visible: usize, polar: usize, label: PairLabel) -> Pair {
        Pair {
            visible,
            polar,
            label,
            visible_attributes: self.attributes[visible],
            polar_attributes: self.attributes[polar],
        }
    }

    /// `batch_size / 2` genuine pairs followed by `batch_size / 2` impostor
    /// pairs. Anchor identities are uniform; an impostor partner identity is
    /// uniform over the remaining identities.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Result<PairBatch> {
        if batch_size == 0 || !batch_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "batch size must be a positive even number, got {batch_size}"
            )));
        }
        let n = self.by_identity.len();
        let mut pairs = Vec::with_capacity(batch_size);
        for _ in 0..batch_size / 2 {
            let a = rng.random_range(0..n);
            let (v, p) = (self.pick(a, rng), self.pick(a, rng));
            pairs.push(self.pair(v, p, PairLabel::Genuine));
        }
        for _ in 0..batch_size / 2 {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let (v, p) = (self.pick(a, rng), self.pick(b, rng));
            pairs.push(self.pair(v, p, PairLabel::Impostor));
        }
        Ok(PairBatch { pairs })
    }
}

/// One balanced batch drawn from the sampler stream of `seed`.
pub fn sample_balanced_pairs(ds: &Dataset, split: Split, batch_size: usize, seed: u64) -> Result<PairBatch> {
    let mut rng = stream_rng(seed, Stream::Sampler, 0);
    PairSampler::new(ds, split)?.sample(batch_size, &mut rng)
}
